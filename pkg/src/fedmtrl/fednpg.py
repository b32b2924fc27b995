"""Federated NPG with Q-tracking (vanilla and entropy-regularized).

Every agent keeps a log-policy and a tracker row ``T_n`` estimating the
global Q-function. One round mixes ``alpha log pi + eta/(1-gamma) T`` over the
graph, renormalizes per state, re-evaluates each agent's own policy under its
own reward and corrects the trackers by the Q increments.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from . import analysis
from .evaluation import EvalMode, Exact, agent_rng, evaluate
from .graph import MixingMatrix
from .mdp import Policy, SoftOptimum, TabularMdp, entropy_term, normalize_log, optimal_values, soft_vq

DIAGNOSTICS = frozenset({"consensus", "omega", "recursion"})
RECURSION_SLACK = 1e-8
CSV_FIELDS = ("iter", "value", "soft_value", "gap", "avg_gap", "consensus_err",
              "omega1", "omega2", "omega3", "omega4", "eval_err")


@dataclass(frozen=True, eq=False)
class MultiTaskRewards:
    """Per-agent reward tables ``tables[n, s, a]`` in ``[0, 1]``."""

    tables: np.ndarray

    def __post_init__(self):
        r = np.array(self.tables, dtype=float)
        if r.ndim == 2:
            r = r[None]
        if r.ndim != 3 or r.shape[0] < 1:
            raise ValueError("rewards must have shape (N, S, A)")
        if not np.all(np.isfinite(r)) or r.min() < 0 or r.max() > 1:
            raise ValueError("rewards must lie in [0, 1]")
        r.setflags(write=False)
        object.__setattr__(self, "tables", r)

    @property
    def n_agents(self) -> int:
        return self.tables.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.tables.mean(axis=0)

    def __getitem__(self, n):
        return self.tables[n]


@dataclass(frozen=True, eq=False)
class RunConfig:
    eta: float
    iterations: int
    mixing: MixingMatrix
    tau: float = 0.0
    eval_mode: EvalMode = Exact()
    tracking: bool = True
    diagnostics: frozenset = frozenset({"consensus"})
    seed: int = 0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        diag = frozenset(self.diagnostics)
        if diag - DIAGNOSTICS:
            raise ValueError(f"unknown diagnostics {sorted(diag - DIAGNOSTICS)}")
        if "recursion" in diag:
            diag = diag | {"omega"}
        object.__setattr__(self, "diagnostics", diag)


@dataclass(eq=False)
class FederatedState:
    log_policies: np.ndarray  # (N, S, A)
    tracker: np.ndarray  # (N, S, A)
    last_q: np.ndarray  # (N, S, A)
    iteration: int = 0
    eval_error: float = 0.0


@dataclass(eq=False)
class AuxState:
    """Auxiliary sequences used only by the error-metric diagnostics."""

    log_xi: np.ndarray  # (N, S, A)
    log_xi_bar: np.ndarray  # (S, A)


@dataclass
class IterationMetrics:
    iter: int
    value: float
    soft_value: float | None
    gap: float
    avg_gap: float
    consensus_err: float | None = None
    omega: tuple | None = None
    eval_err: float = 0.0

    def row(self) -> dict:
        omega = list(self.omega or ())
        omega += [None] * (4 - len(omega))
        return {
            "iter": self.iter, "value": self.value, "soft_value": self.soft_value,
            "gap": self.gap, "avg_gap": self.avg_gap, "consensus_err": self.consensus_err,
            "omega1": omega[0], "omega2": omega[1], "omega3": omega[2], "omega4": omega[3],
            "eval_err": self.eval_err,
        }


@dataclass(eq=False)
class RunResult:
    metrics: list
    state: FederatedState
    optimum: SoftOptimum
    v_star_rho: float
    recursion_violation: float | None = None
    tracking_gap: float = 0.0  # max over iterations of |mean T - mean q|

    @property
    def normalized_gaps(self) -> np.ndarray:
        return np.array([m.gap for m in self.metrics]) / self.v_star_rho


def average_policy(state_or_log_policies) -> Policy:
    """Normalized geometric mean of the agents' policies."""
    lp = getattr(state_or_log_policies, "log_policies", state_or_log_policies)
    return Policy(normalize_log(np.mean(lp, axis=0)))


def consensus_error(log_policies: np.ndarray) -> float:
    avg = average_policy(log_policies).log_prob
    return float(np.max(np.abs(log_policies - avg)))


def _evaluate_agents(mdp, rewards, log_policies, config: RunConfig, iteration: int):
    qs = np.empty_like(log_policies)
    err = 0.0
    exact = isinstance(config.eval_mode, Exact)
    for n in range(rewards.n_agents):
        rng = None if exact else agent_rng(config.seed, n, iteration)
        ev = evaluate(config.eval_mode, mdp, Policy(log_policies[n]), rewards[n], config.tau, rng)
        qs[n] = ev.q
        err = max(err, ev.error)
    return qs, err


def _check_finite(state: FederatedState):
    if not (np.all(np.isfinite(state.log_policies)) and np.all(np.isfinite(state.tracker))):
        raise FloatingPointError(f"non-finite policy or tracker at iteration {state.iteration}")


def init_state(mdp: TabularMdp, rewards: MultiTaskRewards, config: RunConfig) -> FederatedState:
    """Uniform policies; trackers start at each agent's own Q estimate."""
    N, S, A = rewards.n_agents, mdp.num_states, mdp.num_actions
    if config.mixing.n_agents != N:
        raise ValueError(f"mixing matrix has {config.mixing.n_agents} agents, rewards have {N}")
    log_pi = np.full((N, S, A), -math.log(A))
    q, err = _evaluate_agents(mdp, rewards, log_pi, config, 0)
    return FederatedState(log_pi, q.copy(), q, 0, err)


def _policy_update(log_pi, tracker, W: MixingMatrix, eta, tau, gamma):
    alpha = 1.0 - eta * tau / (1.0 - gamma)
    mixed = W.mix(alpha * log_pi + (eta / (1.0 - gamma)) * tracker)
    return mixed - logsumexp(mixed, axis=2, keepdims=True)


def _step(state, mdp, rewards, config: RunConfig, tau: float, tracking: bool) -> FederatedState:
    W = config.mixing
    log_pi = _policy_update(state.log_policies, state.tracker, W, config.eta, tau, mdp.gamma)
    cfg = config if tau == config.tau else replace(config, tau=tau)
    q_new, err = _evaluate_agents(mdp, rewards, log_pi, cfg, state.iteration + 1)
    if tracking:
        tracker = W.mix(state.tracker + q_new - state.last_q)
    else:
        tracker = W.mix(q_new)
    new = FederatedState(log_pi, tracker, q_new, state.iteration + 1, err)
    _check_finite(new)
    return new


def vanilla_step(state, mdp, rewards, config: RunConfig) -> FederatedState:
    return _step(state, mdp, rewards, config, 0.0, True)


def regularized_step(state, mdp, rewards, config: RunConfig) -> FederatedState:
    return _step(state, mdp, rewards, config, config.tau, True)


def no_tracking_step(state, mdp, rewards, config: RunConfig) -> FederatedState:
    """Ablation: trackers are the mixed local Q estimates, with no correction term."""
    return _step(state, mdp, rewards, config, config.tau, False)


def step(state, mdp, rewards, config: RunConfig) -> FederatedState:
    if not config.tracking:
        return no_tracking_step(state, mdp, rewards, config)
    if config.tau > 0:
        return regularized_step(state, mdp, rewards, config)
    return vanilla_step(state, mdp, rewards, config)


def init_aux(state: FederatedState, optimum: SoftOptimum) -> AuxState:
    """Auxiliary sequences at t=0; the per-state scale is ``||exp(Q*_tau/tau)||_1`` (1 if tau=0)."""
    tau = optimum.tau
    log_scale = logsumexp(optimum.q_star / tau, axis=1) if tau > 0 else np.zeros(state.log_policies.shape[1])
    mean_log = state.log_policies.mean(axis=0)
    log_norm = logsumexp(mean_log, axis=1)
    log_xi = state.log_policies + (log_scale - log_norm)[None, :, None]
    log_xi_bar = log_scale[:, None] + normalize_log(mean_log)
    return AuxState(log_xi, log_xi_bar)


def update_aux(aux: AuxState, state: FederatedState, W: MixingMatrix, eta, tau, gamma) -> AuxState:
    """Advance the auxiliary sequences using ``T`` and the mean Q of the *pre-step* state."""
    alpha = 1.0 - eta * tau / (1.0 - gamma)
    step_size = eta / (1.0 - gamma)
    q_hat = state.last_q.mean(axis=0)
    log_xi = W.mix(alpha * aux.log_xi + step_size * state.tracker)
    log_xi_bar = alpha * aux.log_xi_bar + step_size * q_hat
    return AuxState(log_xi, log_xi_bar)


def omega_metrics(state: FederatedState, aux: AuxState, optimum: SoftOptimum, q_avg_policy=None) -> tuple:
    """Error metrics of the linear-system analysis.

    Four entries for regularized runs (``q_avg_policy`` is the global soft Q of
    the average policy), two for vanilla runs.
    """
    q_hat = state.last_q.mean(axis=0)
    u = np.sqrt(np.sum((aux.log_xi - aux.log_xi_bar) ** 2, axis=0))
    v = np.sqrt(np.sum((state.tracker - q_hat) ** 2, axis=0))
    omega1, omega2 = float(u.max()), float(v.max())
    tau = optimum.tau
    if tau == 0:
        return omega1, omega2
    omega3 = float(np.max(np.abs(optimum.q_star - tau * aux.log_xi_bar)))
    omega4 = max(0.0, float(-np.min(q_avg_policy - tau * aux.log_xi_bar)))
    return omega1, omega2, omega3, omega4


def _uniform(n):
    return np.full(n, 1.0 / n)


def run(mdp: TabularMdp, rewards: MultiTaskRewards, config: RunConfig, rho=None,
        optimum: SoftOptimum | None = None) -> RunResult:
    """Run ``config.iterations`` rounds; metrics always use exact evaluation of the average policy."""
    tau, gamma = config.tau, mdp.gamma
    if tau > 0 and config.eta > (1 - gamma) / tau:
        warnings.warn(f"eta={config.eta} exceeds (1-gamma)/tau={(1 - gamma) / tau}", stacklevel=2)
    rho = _uniform(mdp.num_states) if rho is None else np.asarray(rho, dtype=float)
    r_bar = rewards.mean
    if optimum is None:
        optimum = optimal_values(mdp, r_bar, tau)
    v_star_rho = float(rho @ optimum.v_star)

    diag = config.diagnostics
    W = config.mixing
    use_omega = "omega" in diag
    check_recursion = "recursion" in diag
    if use_omega and not W.doubly_stochastic:
        warnings.warn("omega/recursion diagnostics need a doubly stochastic mixing matrix; disabled", stacklevel=2)
        use_omega = check_recursion = False
    if check_recursion:
        params = analysis.AnalysisParams(W.n_agents, gamma, tau, W.sigma, mdp.num_actions, config.eta)
        rec_matrix, rec_offset = analysis.recursion_matrix(params, "regularized" if tau > 0 else "vanilla")
    violation = 0.0 if check_recursion else None

    state = init_state(mdp, rewards, config)
    aux = init_aux(state, optimum) if use_omega else None
    metrics = []
    gap_sum = 0.0
    track = 0.0
    prev_omega = None
    for t in range(config.iterations + 1):
        if t > 0:
            new_state = step(state, mdp, rewards, config)
            if aux is not None:
                aux = update_aux(aux, state, W, config.eta, tau, gamma)
            state = new_state
        track = max(track, tracking_gap(state))
        pi_bar = average_policy(state)
        v_soft, q_soft = soft_vq(mdp, pi_bar, r_bar, tau)
        if tau > 0:
            value = float(rho @ (v_soft - tau * entropy_term(mdp, pi_bar)))
            soft_value = float(rho @ v_soft)
            gap = v_star_rho - soft_value
        else:
            value, soft_value = float(rho @ v_soft), None
            gap = v_star_rho - value
        if not math.isfinite(gap):
            raise FloatingPointError(f"non-finite gap at iteration {t}")
        gap_sum += gap
        omega = omega_metrics(state, aux, optimum, q_soft) if aux is not None else None
        if check_recursion and prev_omega is not None:
            bound = rec_matrix @ np.asarray(prev_omega) + rec_offset
            violation = max(violation, float(np.max(np.asarray(omega) - bound)))
        prev_omega = omega
        metrics.append(IterationMetrics(
            iter=t, value=value, soft_value=soft_value, gap=gap, avg_gap=gap_sum / (t + 1),
            consensus_err=consensus_error(state.log_policies) if "consensus" in diag else None,
            omega=omega, eval_err=state.eval_error,
        ))
    return RunResult(metrics, state, optimum, v_star_rho, violation, track)


def tracking_gap(state: FederatedState) -> float:
    """``max |mean_n T_n - mean_n q_n|``; zero up to rounding under doubly stochastic mixing."""
    return float(np.max(np.abs(state.tracker.mean(axis=0) - state.last_q.mean(axis=0))))
