"""Per-agent policy evaluation: exact, bounded-noise, and model-based."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .mdp import Policy, TabularMdp, soft_q


@dataclass(frozen=True)
class Exact:
    def __str__(self):
        return "exact"


@dataclass(frozen=True)
class NoisyExact:
    """Exact Q plus i.i.d. uniform noise in ``[-eps_inf, eps_inf]`` per entry."""

    eps_inf: float

    def __post_init__(self):
        if not (np.isfinite(self.eps_inf) and self.eps_inf >= 0):
            raise ValueError("eps_inf must be finite and nonnegative")

    def __str__(self):
        return f"noisy:{self.eps_inf!r}"


@dataclass(frozen=True)
class ModelBased:
    """Solve exactly in an empirical kernel built from ``samples_per_sa`` draws per pair."""

    samples_per_sa: int

    def __post_init__(self):
        if int(self.samples_per_sa) < 1:
            raise ValueError("samples_per_sa must be at least 1")

    def __str__(self):
        return f"model:{self.samples_per_sa}"


EvalMode = Union[Exact, NoisyExact, ModelBased]


@dataclass(frozen=True, eq=False)
class Evaluation:
    q: np.ndarray
    error: float  # reported bound (NoisyExact) or realized sup-norm error (ModelBased)


def parse_eval_mode(text: str) -> EvalMode:
    """Parse ``exact``, ``noisy:EPS`` or ``model:M``."""
    kind, _, arg = text.strip().partition(":")
    if kind == "exact" and not arg:
        return Exact()
    if kind == "noisy" and arg:
        return NoisyExact(float(arg))
    if kind == "model" and arg:
        return ModelBased(int(arg))
    raise ValueError(f"bad evaluation mode {text!r}; expected exact, noisy:EPS or model:M")


def empirical_kernel(mdp: TabularMdp, samples_per_sa: int, rng: np.random.Generator) -> TabularMdp:
    S, A = mdp.num_states, mdp.num_actions
    counts = np.empty((S, A, S))
    for s in range(S):
        for a in range(A):
            counts[s, a] = rng.multinomial(samples_per_sa, mdp.transition[s, a])
    return TabularMdp(counts / samples_per_sa, mdp.gamma)


def evaluate(mode: EvalMode, mdp: TabularMdp, policy: Policy, reward, tau: float = 0.0,
             rng: np.random.Generator | None = None) -> Evaluation:
    q = soft_q(mdp, policy, reward, tau)
    if isinstance(mode, Exact):
        return Evaluation(q, 0.0)
    if rng is None:
        raise ValueError(f"{mode} evaluation needs an explicit rng")
    if isinstance(mode, NoisyExact):
        if mode.eps_inf == 0:
            return Evaluation(q, 0.0)
        noise = rng.uniform(-mode.eps_inf, mode.eps_inf, size=q.shape)
        return Evaluation(q + noise, float(mode.eps_inf))
    if isinstance(mode, ModelBased):
        model = empirical_kernel(mdp, int(mode.samples_per_sa), rng)
        q_hat = soft_q(model, policy, reward, tau)
        return Evaluation(q_hat, float(np.max(np.abs(q_hat - q))))
    raise TypeError(f"unknown evaluation mode {mode!r}")


def agent_rng(seed: int, agent: int, iteration: int) -> np.random.Generator:
    """Independent stream for one agent's evaluation at one iteration."""
    return np.random.default_rng([seed, agent, iteration])
