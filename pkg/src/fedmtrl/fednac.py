"""Federated natural actor-critic with log-linear policies and linear critics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .graph import MixingMatrix
from .mdp import (Policy, TabularMdp, exact_q, exact_v, normalize_log, optimal_values,
                  state_action_visitation)

MAX_SAMPLER_STEPS = 10**7
NAC_CSV_FIELDS = ("iter", "value", "gap", "actor_consensus", "tracker_consensus",
                  "mean_critic_loss", "eps_approx_surrogate")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature table ``phi[s, a]`` of dimension ``p`` with norm bound ``c_phi``."""

    table: np.ndarray
    c_phi: float | None = None

    def __post_init__(self):
        phi = np.array(self.table, dtype=float)
        if phi.ndim != 3 or phi.shape[2] < 1:
            raise ValueError("feature table must have shape (S, A, p)")
        if not np.all(np.isfinite(phi)):
            raise ValueError("features must be finite")
        norm = float(np.max(np.linalg.norm(phi, axis=2)))
        c = norm if self.c_phi is None else float(self.c_phi)
        if c <= 0 or norm > c * (1 + 1e-12):
            raise ValueError(f"feature norms reach {norm}, above bound {c}")
        phi.setflags(write=False)
        object.__setattr__(self, "table", phi)
        object.__setattr__(self, "c_phi", c)

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    @property
    def shape(self):
        return self.table.shape[:2]

    def __call__(self, s, a):
        return self.table[s, a]

    @classmethod
    def one_hot(cls, num_states: int, num_actions: int) -> FeatureMap:
        p = num_states * num_actions
        return cls(np.eye(p).reshape(num_states, num_actions, p), 1.0)

    @classmethod
    def random_projection(cls, num_states: int, num_actions: int, dim: int, seed: int = 0,
                          c_phi: float = 1.0) -> FeatureMap:
        """Seeded Gaussian rows rescaled to norm ``c_phi``."""
        rng = np.random.default_rng(seed)
        phi = rng.standard_normal((num_states, num_actions, dim))
        phi *= c_phi / np.linalg.norm(phi, axis=2, keepdims=True)
        return cls(phi, c_phi)

    @classmethod
    def from_table(cls, table, c_phi: float | None = None) -> FeatureMap:
        return cls(np.asarray(table, dtype=float), c_phi)


@dataclass(frozen=True)
class CriticSample:
    state: int
    action: int
    q_hat: float
    length: int  # h, the index of the returned pair


def log_linear_policy(xi, features: FeatureMap) -> Policy:
    """``f_xi(a|s) = softmax_a phi(s,a)^T xi``."""
    return Policy(normalize_log(features.table @ np.asarray(xi, dtype=float)))


def _check_dist(nu, shape) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if nu.shape != tuple(shape):
        raise ValueError(f"distribution must have shape {tuple(shape)}, got {nu.shape}")
    if np.any(nu < 0) or abs(nu.sum() - 1.0) > 1e-10:
        raise ValueError("distribution must be nonnegative and sum to 1")
    return nu


def _inverse_cdf(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def sample_batch(mdp: TabularMdp, nu, policy: Policy, reward, size: int, rng: np.random.Generator):
    """Vectorized Q-Sampler: ``size`` independent draws.

    Returns ``(states, actions, q_hat, lengths)``.
    """
    S, A = mdp.num_states, mdp.num_actions
    nu = _check_dist(nu, (S, A))
    r = np.asarray(reward, dtype=float)
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_pi = np.cumsum(policy.probs, axis=1)
    gamma = mdp.gamma
    idx = np.minimum(np.searchsorted(np.cumsum(nu.ravel()), rng.random(size), side="right"), S * A - 1)
    s, a = np.divmod(idx, A)
    lengths = np.zeros(size, dtype=np.int64)
    budget = MAX_SAMPLER_STEPS

    def advance(s_cur, a_cur, active):
        s_new = _inverse_cdf(cum_p[s_cur[active], a_cur[active]], rng.random(active.size))
        a_new = _inverse_cdf(cum_pi[s_new], rng.random(active.size))
        s_cur[active] = s_new
        a_cur[active] = a_new

    active = np.flatnonzero(rng.random(size) < gamma)
    while active.size:
        budget -= active.size
        if budget < 0:
            raise RuntimeError("Q-Sampler exceeded its step cap")
        advance(s, a, active)
        lengths[active] += 1
        active = active[rng.random(active.size) < gamma]

    q_hat = r[s, a].copy()
    st, at = s.copy(), a.copy()
    active = np.flatnonzero(rng.random(size) < gamma)
    while active.size:
        budget -= active.size
        if budget < 0:
            raise RuntimeError("Q-Sampler exceeded its step cap")
        advance(st, at, active)
        q_hat[active] += r[st[active], at[active]]
        active = active[rng.random(active.size) < gamma]
    return s, a, q_hat, lengths


def q_sampler(mdp: TabularMdp, nu, policy: Policy, reward, rng: np.random.Generator) -> CriticSample:
    s, a, q, h = sample_batch(mdp, nu, policy, reward, 1, rng)
    return CriticSample(int(s[0]), int(a[0]), float(q[0]), int(h[0]))


def default_critic_lr(c_phi: float, rule: str = "squared") -> float:
    """``1/(2 C_phi^2)`` (squared) or ``1/(2 C_phi)`` (linear)."""
    if rule == "squared":
        return 1.0 / (2.0 * c_phi**2)
    if rule == "linear":
        return 1.0 / (2.0 * c_phi)
    raise ValueError(f"unknown critic step rule {rule!r}")


def feature_covariance(features: FeatureMap, nu) -> np.ndarray:
    """``Sigma_nu = E_{(s,a)~nu} phi phi^T``."""
    nu = _check_dist(nu, features.shape)
    phi = features.table
    return np.einsum("sa,sap,saq->pq", nu, phi, phi)


def min_covariance_eigenvalue(features: FeatureMap, nu) -> float:
    return float(np.linalg.eigvalsh(feature_covariance(features, nu))[0])


def transfer_bound(gamma: float, nu) -> float:
    """Crude bound ``1/((1-gamma)^2 nu_min^2)`` on the transfer constant."""
    nu_min = float(np.min(nu))
    if nu_min <= 0:
        return math.inf
    return 1.0 / ((1 - gamma) ** 2 * nu_min**2)


def divergence_threshold(c_phi: float, mu: float, gamma: float) -> float:
    return 1e6 * c_phi / (max(mu, 1e-12) * (1 - gamma) ** 2)


def averaged_sgd(phi: np.ndarray, q: np.ndarray, beta: float, threshold: float = math.inf) -> np.ndarray:
    """Run independent least-squares SGD chains from zero and return averaged iterates.

    ``phi`` is (B, K, p), ``q`` is (B, K); returns (B, p).
    """
    B, K, p = phi.shape
    w = np.zeros((B, p))
    acc = np.zeros((B, p))
    step = 2.0 * beta
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
        for k in range(K):
            f = phi[:, k]
            resid = np.einsum("bp,bp->b", w, f) - q[:, k]
            w -= (step * resid)[:, None] * f
            acc += w
            if k % 1024 == 1023 or k == K - 1:
                norm = np.max(np.linalg.norm(w, axis=1))
                if not np.isfinite(norm) or norm > threshold:
                    raise FloatingPointError(
                        f"critic diverged at step {k + 1} (|w|={norm:.3g}); critic_lr={beta} is likely too large")
    return acc / K


def critic_solve_batch(mdp: TabularMdp, nu, policies, rewards, features: FeatureMap, K: int,
                       beta: float, rngs, threshold: float = math.inf) -> np.ndarray:
    """One averaged-SGD critic per (policy, reward, rng) triple; returns (B, p)."""
    if K < 1:
        raise ValueError("critic needs K >= 1")
    B = len(policies)
    phi = np.empty((B, K, features.dim))
    q = np.empty((B, K))
    for b in range(B):
        s, a, q_hat, _ = sample_batch(mdp, nu, policies[b], rewards[b], K, rngs[b])
        phi[b] = features.table[s, a]
        q[b] = q_hat
    return averaged_sgd(phi, q, beta, threshold)


def critic_solve(mdp: TabularMdp, nu, policy: Policy, reward, features: FeatureMap, K: int,
                 beta: float, rng: np.random.Generator) -> np.ndarray:
    mu = min_covariance_eigenvalue(features, nu)
    thr = divergence_threshold(features.c_phi, mu, mdp.gamma)
    return critic_solve_batch(mdp, nu, [policy], [reward], features, K, beta, [rng], thr)[0]


def approximation_loss(w, q_table, dist, features: FeatureMap) -> float:
    """``sum_{s,a} dist(s,a) (w^T phi(s,a) - q(s,a))^2``."""
    pred = features.table @ np.asarray(w, dtype=float)
    return float(np.sum(np.asarray(dist) * (pred - np.asarray(q_table)) ** 2))


def approximation_loss_grad(w, q_table, dist, features: FeatureMap) -> np.ndarray:
    phi = features.table
    resid = phi @ np.asarray(w, dtype=float) - np.asarray(q_table)
    return 2.0 * np.einsum("sa,sa,sap->p", np.asarray(dist), resid, phi)


def weighted_least_squares(q_table, dist, features: FeatureMap) -> np.ndarray:
    """Minimum-norm minimizer of :func:`approximation_loss`."""
    phi = features.table.reshape(-1, features.dim)
    d = np.asarray(dist, dtype=float).ravel()
    gram = phi.T @ (d[:, None] * phi)
    rhs = phi.T @ (d * np.asarray(q_table, dtype=float).ravel())
    return np.linalg.pinv(gram, rcond=1e-12, hermitian=True) @ rhs


def exact_critic_target(mdp: TabularMdp, nu, policy: Policy, reward, features: FeatureMap) -> np.ndarray:
    q = exact_q(mdp, policy, reward)
    d = state_action_visitation(mdp, policy, nu)
    return weighted_least_squares(q, d, features)


@dataclass(frozen=True, eq=False)
class FedNacConfig:
    actor_iterations: int
    critic_iterations: int
    actor_lr: float
    mixing: MixingMatrix
    critic_lr: float | None = None  # None: derived from critic_lr_rule
    critic_lr_rule: str = "squared"
    init_dist: np.ndarray | None = None  # None: uniform over (s, a)
    seed: int = 0
    critic_diagnostics: bool = True

    def __post_init__(self):
        if self.critic_iterations < 1:
            raise ValueError("critic_iterations must be at least 1")
        if self.actor_iterations < 0:
            raise ValueError("actor_iterations must be nonnegative")
        if not self.actor_lr > 0:
            raise ValueError("actor_lr must be positive")
        if self.critic_lr is not None and not self.critic_lr > 0:
            raise ValueError("critic_lr must be positive")

    def beta(self, features: FeatureMap) -> float:
        return self.critic_lr if self.critic_lr is not None else default_critic_lr(features.c_phi, self.critic_lr_rule)

    def nu(self, shape) -> np.ndarray:
        if self.init_dist is None:
            return np.full(shape, 1.0 / (shape[0] * shape[1]))
        return _check_dist(self.init_dist, shape)


@dataclass(eq=False)
class FedNacState:
    actor: np.ndarray  # (N, p), xi^(t)
    critic: np.ndarray  # (N, p), w^(t-1)
    tracker: np.ndarray  # (N, p), h^(t-1)
    iteration: int = 0

    @classmethod
    def initial(cls, n_agents: int, dim: int) -> FedNacState:
        z = np.zeros((n_agents, dim))
        return cls(z.copy(), z.copy(), z.copy(), 0)


@dataclass
class NacMetrics:
    iter: int
    value: float
    gap: float
    actor_consensus: float
    tracker_consensus: float | None = None
    mean_critic_loss: float | None = None
    eps_approx_surrogate: float | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in NAC_CSV_FIELDS}


@dataclass(eq=False)
class FedNacResult:
    metrics: list
    state: FedNacState
    v_star_rho: float
    mu: float
    tracking_gap: float  # max over rounds of |mean h - mean w|


def nac_agent_rng(seed: int, agent: int, round_: int) -> np.random.Generator:
    return np.random.default_rng([seed, agent, round_])


def frobenius_consensus(x: np.ndarray) -> float:
    return float(np.linalg.norm(x - x.mean(axis=0)))


def fednac_step(state: FedNacState, mdp: TabularMdp, rewards, features: FeatureMap, config: FedNacConfig,
                rngs=None) -> FedNacState:
    """Critic fits for every agent, gradient tracking on critics, then the mixed actor step."""
    W = config.mixing
    N = W.n_agents
    t = state.iteration
    nu = config.nu(features.shape)
    if rngs is None:
        rngs = [nac_agent_rng(config.seed, n, t) for n in range(N)]
    policies = [log_linear_policy(state.actor[n], features) for n in range(N)]
    mu = min_covariance_eigenvalue(features, nu)
    thr = divergence_threshold(features.c_phi, mu, mdp.gamma)
    w = critic_solve_batch(mdp, nu, policies, [rewards[n] for n in range(N)], features,
                           config.critic_iterations, config.beta(features), rngs, thr)
    h = W.mix(state.tracker + w - state.critic)
    actor = W.mix(state.actor + config.actor_lr * h)
    return FedNacState(actor, w, h, t + 1)


def _critic_losses(mdp, rewards, features, actor, w, nu):
    losses, approx = [], []
    for n in range(actor.shape[0]):
        pi = log_linear_policy(actor[n], features)
        q = exact_q(mdp, pi, rewards[n])
        d = state_action_visitation(mdp, pi, nu)
        losses.append(approximation_loss(w[n], q, d, features))
        approx.append(approximation_loss(weighted_least_squares(q, d, features), q, d, features))
    return float(np.mean(losses)), float(np.mean(approx))


def run_fednac(mdp: TabularMdp, rewards, features: FeatureMap, config: FedNacConfig, rho=None) -> FedNacResult:
    """Run ``actor_iterations`` rounds; row ``t`` describes the policy ``xi^(t)`` and the critic fitted to it."""
    S, A = mdp.num_states, mdp.num_actions
    if features.shape != (S, A):
        raise ValueError("feature map shape does not match the MDP")
    N = config.mixing.n_agents
    r_tables = np.asarray(getattr(rewards, "tables", rewards), dtype=float)
    if r_tables.shape != (N, S, A):
        raise ValueError(f"rewards must have shape {(N, S, A)}")
    nu = config.nu((S, A))
    mu = min_covariance_eigenvalue(features, nu)
    if mu <= 1e-12:
        warnings.warn(f"feature covariance is singular under nu (mu={mu:.3g})", stacklevel=2)
    rho = np.full(S, 1.0 / S) if rho is None else np.asarray(rho, dtype=float)
    r_bar = r_tables.mean(axis=0)
    v_star_rho = float(rho @ optimal_values(mdp, r_bar).v_star)

    state = FedNacState.initial(N, features.dim)
    metrics = []
    track_gap = 0.0
    for t in range(config.actor_iterations + 1):
        xi_bar = state.actor.mean(axis=0)
        value = float(rho @ exact_v(mdp, log_linear_policy(xi_bar, features), r_bar))
        row = NacMetrics(iter=t, value=value, gap=v_star_rho - value,
                         actor_consensus=frobenius_consensus(state.actor))
        if t < config.actor_iterations:
            prev_actor = state.actor
            state = fednac_step(state, mdp, r_tables, features, config)
            track_gap = max(track_gap, float(np.max(np.abs(state.tracker.mean(0) - state.critic.mean(0)))))
            row.tracker_consensus = float(np.linalg.norm(state.tracker - state.critic.mean(axis=0)))
            if config.critic_diagnostics:
                row.mean_critic_loss, row.eps_approx_surrogate = _critic_losses(
                    mdp, r_tables, features, prev_actor, state.critic, nu)
        if not all(math.isfinite(x) for x in (row.value, row.actor_consensus)):
            raise FloatingPointError(f"non-finite actor at round {t}")
        metrics.append(row)
    return FedNacResult(metrics, state, v_star_rho, mu, track_gap)
