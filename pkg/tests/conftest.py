import numpy as np
import pytest

from fedmtrl.fednpg import MultiTaskRewards
from fedmtrl.mdp import Policy, TabularMdp

ACCEPTANCE = {}  # criterion number -> "PASS ..." / "FAIL ..." line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def random_instance(num_states, num_actions, n_agents=1, seed=0, gamma=0.9):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    r = rng.uniform(size=(n_agents, num_states, num_actions))
    return TabularMdp(P, gamma), MultiTaskRewards(r)


def random_policy(num_states, num_actions, rng, scale=1.0):
    logits = scale * rng.standard_normal((num_states, num_actions))
    return Policy(logits - np.log(np.exp(logits).sum(axis=1, keepdims=True)))


def dense_q(mdp, probs, reward, tau=0.0):
    """Reference soft Q from an explicit dense solve, independent of the library."""
    S = mdp.num_states
    P = mdp.transition
    P_pi = np.einsum("sa,sat->st", probs, P)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(probs > 0, probs * np.log(probs), 0.0).sum(axis=1)
    r_pi = (probs * reward).sum(axis=1) + tau * ent
    v = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi)
    return reward + mdp.gamma * P @ v, v


def centralized_npg(mdp, reward, eta, tau, iterations):
    """Single-agent (regularized) NPG in logits form; returns the list of policy tables."""
    S, A = mdp.num_states, mdp.num_actions
    theta = np.zeros((S, A))
    out = []
    for _ in range(iterations + 1):
        probs = np.exp(theta - theta.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        out.append(probs)
        q, _ = dense_q(mdp, probs, reward, tau)
        theta = (1 - eta * tau / (1 - mdp.gamma)) * theta + eta / (1 - mdp.gamma) * q
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
