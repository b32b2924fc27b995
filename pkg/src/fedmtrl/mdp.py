"""Tabular MDPs, softmax policies and exact (soft) policy evaluation.

Tables are stored row-major as ``[state, action]``. Policies live in the log
domain; everything else is in linear space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp

PROB_ATOL = 1e-12
POLICY_ATOL = 1e-10

# Above this many states the linear solves switch to a sparse LU factorization.
SPARSE_STATES = 256


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with transition kernel ``transition[s, a, s']`` and discount ``gamma``."""

    transition: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ValueError("transition probabilities must be finite and nonnegative")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > PROB_ATOL:
            raise ValueError("every transition row P[s, a] must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")
        P.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def sa_kernel(self):
        """Kernel as an ``(S*A, S)`` matrix; sparse for large state spaces."""
        flat = self.transition.reshape(-1, self.num_states)
        if self.num_states >= SPARSE_STATES:
            return sp.csr_matrix(flat)
        return flat

    def expected_next(self, v: np.ndarray) -> np.ndarray:
        """``sum_{s'} P(s'|s,a) v(s')`` as an ``(S, A)`` table."""
        return np.asarray(self.sa_kernel @ v).reshape(self.num_states, self.num_actions)


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic policy stored as ``log_prob[s, a]``."""

    log_prob: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_prob, dtype=float)
        if lp.ndim != 2:
            raise ValueError("log_prob must be a (S, A) table")
        if np.any(np.isnan(lp)) or np.any(lp == np.inf):
            raise ValueError("log_prob must not contain NaN or +inf")
        if np.max(np.abs(np.exp(logsumexp(lp, axis=1)) - 1.0)) > POLICY_ATOL:
            raise ValueError("policy rows must normalize to 1")
        object.__setattr__(self, "log_prob", lp)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_prob)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((num_states, num_actions), -math.log(num_actions)))


@dataclass(frozen=True, eq=False)
class SoftOptimum:
    """Optimal (soft) values; ``tau == 0`` gives the unregularized optimum."""

    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: Policy
    tau: float
    iterations: int = field(default=0)


def normalize_log(logits: np.ndarray) -> np.ndarray:
    """Subtract the per-row log-sum-exp over the last axis."""
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def policy_from_logits(theta) -> Policy:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("logits must be finite")
    return Policy(normalize_log(theta))


def check_reward(mdp: TabularMdp, reward) -> np.ndarray:
    r = np.asarray(reward, dtype=float)
    if r.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"reward must have shape {(mdp.num_states, mdp.num_actions)}, got {r.shape}")
    return r


def entropy(policy: Policy) -> np.ndarray:
    """Per-state Shannon entropy, with ``0 log 0 = 0``."""
    p = policy.probs
    plogp = p * np.where(p > 0, policy.log_prob, 0.0)
    return -plogp.sum(axis=1)


def _policy_kernel(mdp: TabularMdp, probs: np.ndarray):
    """State-to-state kernel ``P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)``."""
    S, A = probs.shape
    if sp.issparse(mdp.sa_kernel):
        rows = np.repeat(np.arange(S), A)
        mix = sp.csr_matrix((probs.ravel(), (rows, np.arange(S * A))), shape=(S, S * A))
        return (mix @ mdp.sa_kernel).tocsc()
    return np.einsum("sa,sat->st", probs, mdp.transition)


def _solve_discounted(mdp: TabularMdp, kernel, rhs: np.ndarray, transpose=False) -> np.ndarray:
    """Solve ``(I - gamma K) x = rhs`` (or with ``K^T``) by a direct solve."""
    S = mdp.num_states
    if sp.issparse(kernel):
        K = kernel.T if transpose else kernel
        return spla.spsolve((sp.identity(S, format="csc") - mdp.gamma * K).tocsc(), rhs)
    K = kernel.T if transpose else kernel
    return np.linalg.solve(np.eye(S) - mdp.gamma * K, rhs)


def _iterate_discounted(mdp: TabularMdp, kernel, rhs: np.ndarray, tol=1e-12) -> np.ndarray:
    x = np.array(rhs, dtype=float)
    cap = iteration_cap(mdp.gamma, tol, scale=np.max(np.abs(rhs), initial=1.0))
    for _ in range(cap):
        nxt = rhs + mdp.gamma * (kernel @ x)
        if np.max(np.abs(nxt - x)) < tol:
            return nxt
        x = nxt
    raise RuntimeError("iterative policy evaluation did not converge")


def iteration_cap(gamma: float, tol: float, scale: float = 1.0, margin: int = 1000) -> int:
    """Iterations after which a gamma-contraction from ``scale`` is below ``tol``."""
    if gamma == 0.0:
        return margin
    return int(math.ceil(math.log(tol * (1.0 - gamma) / max(scale, 1.0)) / math.log(gamma))) + margin


def _evaluate(mdp: TabularMdp, policy: Policy, reward, tau: float, method: str):
    r = check_reward(mdp, reward)
    p = policy.probs
    if policy.log_prob.shape != r.shape:
        raise ValueError("policy and reward shapes differ")
    r_pi = (p * r).sum(axis=1)
    if tau > 0:
        r_pi = r_pi + tau * entropy(policy)
    kernel = _policy_kernel(mdp, p)
    if method == "direct":
        v = _solve_discounted(mdp, kernel, r_pi)
    elif method == "iterative":
        v = _iterate_discounted(mdp, kernel, r_pi)
    else:
        raise ValueError(f"unknown evaluation method {method!r}")
    q = r + mdp.gamma * mdp.expected_next(v)
    return v, q


def exact_v(mdp: TabularMdp, policy: Policy, reward, method: str = "direct") -> np.ndarray:
    return _evaluate(mdp, policy, reward, 0.0, method)[0]


def exact_q(mdp: TabularMdp, policy: Policy, reward, method: str = "direct") -> np.ndarray:
    return _evaluate(mdp, policy, reward, 0.0, method)[1]


def _check_tau(tau: float):
    if not tau >= 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")


def soft_v(mdp: TabularMdp, policy: Policy, reward, tau: float, method: str = "direct") -> np.ndarray:
    _check_tau(tau)
    return _evaluate(mdp, policy, reward, tau, method)[0]


def soft_q(mdp: TabularMdp, policy: Policy, reward, tau: float, method: str = "direct") -> np.ndarray:
    _check_tau(tau)
    return _evaluate(mdp, policy, reward, tau, method)[1]


def soft_vq(mdp: TabularMdp, policy: Policy, reward, tau: float = 0.0):
    """Both soft value and soft Q-function from a single solve."""
    _check_tau(tau)
    return _evaluate(mdp, policy, reward, tau, "direct")


def discounted_state_visitation(mdp: TabularMdp, policy: Policy, rho) -> np.ndarray:
    """``d = (1 - gamma) (I - gamma P_pi^T)^{-1} rho``."""
    rho = np.asarray(rho, dtype=float)
    kernel = _policy_kernel(mdp, policy.probs)
    return (1.0 - mdp.gamma) * _solve_discounted(mdp, kernel, rho, transpose=True)


def state_action_visitation(mdp: TabularMdp, policy: Policy, nu) -> np.ndarray:
    """Discounted state-action occupancy when ``(s0, a0) ~ nu``.

    The first pair is drawn from ``nu`` and later actions from the policy, so
    ``d(s,a) = (1-gamma) nu(s,a) + gamma pi(a|s) d_{mu1}(s)`` where ``mu1`` is the
    distribution of ``s1``.
    """
    nu = np.asarray(nu, dtype=float)
    S, A = mdp.num_states, mdp.num_actions
    mu1 = nu.ravel() @ mdp.transition.reshape(S * A, S)
    d_next = discounted_state_visitation(mdp, policy, mu1)
    return (1.0 - mdp.gamma) * nu + mdp.gamma * policy.probs * d_next[:, None]


def entropy_term(mdp: TabularMdp, policy: Policy, s: int | None = None):
    """Discounted entropy ``H(s, pi)`` from state ``s`` (all states if ``s`` is None)."""
    ent = entropy(policy)
    kernel = _policy_kernel(mdp, policy.probs)
    h = _solve_discounted(mdp, kernel, ent)
    return h if s is None else float(h[s])


def greedy_policy(q: np.ndarray) -> Policy:
    """Deterministic policy; ties go to the lowest action index."""
    S, A = q.shape
    lp = np.full((S, A), -np.inf)
    lp[np.arange(S), np.argmax(q, axis=1)] = 0.0
    return Policy(lp)


def optimal_values(mdp: TabularMdp, reward, tau: float = 0.0, tol: float = 1e-12) -> SoftOptimum:
    """(Soft) value iteration until successive iterates differ by less than ``tol``."""
    _check_tau(tau)
    r = check_reward(mdp, reward)
    scale = np.max(np.abs(r), initial=1.0) + tau * math.log(mdp.num_actions)
    cap = iteration_cap(mdp.gamma, tol, scale)
    v = np.zeros(mdp.num_states)
    for it in range(1, cap + 1):
        q = r + mdp.gamma * mdp.expected_next(v)
        nv = tau * logsumexp(q / tau, axis=1) if tau > 0 else q.max(axis=1)
        delta = np.max(np.abs(nv - v))
        v = nv
        if delta < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge within {cap} iterations")
    q = r + mdp.gamma * mdp.expected_next(v)
    if tau > 0:
        v = tau * logsumexp(q / tau, axis=1)
        pi = Policy(normalize_log(q / tau))
    else:
        v = q.max(axis=1)
        pi = greedy_policy(q)
    return SoftOptimum(v_star=v, q_star=q, pi_star=pi, tau=float(tau), iterations=it)


def performance_difference_check(mdp: TabularMdp, reward, pi: Policy, pi_prime: Policy, rho) -> float:
    """Residual of the performance-difference identity; should be at fp level."""
    rho = np.asarray(rho, dtype=float)
    v = exact_v(mdp, pi, reward)
    v_prime = exact_v(mdp, pi_prime, reward)
    q_prime = exact_q(mdp, pi_prime, reward)
    d = discounted_state_visitation(mdp, pi, rho)
    adv = np.sum(q_prime * (pi.probs - pi_prime.probs), axis=1)
    lhs = rho @ v - rho @ v_prime
    return float(abs(lhs - (d @ adv) / (1.0 - mdp.gamma)))


def soft_lipschitz_constant(gamma: float, tau: float, num_actions: int) -> float:
    """Lipschitz constant of ``theta -> Q_tau^{pi_theta}`` in the sup-norm (rewards in [0, 1])."""
    return gamma * (1 + gamma + 2 * tau * (1 - gamma) * math.log(num_actions)) / (1 - gamma) ** 2
