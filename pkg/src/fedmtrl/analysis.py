"""Constants from the FedNPG convergence analysis.

Error-recursion matrices, step-size thresholds and consensus bounds, written
out exactly as closed-form expressions so they can be compared against
measured trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import soft_lipschitz_constant


@dataclass(frozen=True)
class AnalysisParams:
    n_agents: int
    gamma: float
    tau: float
    sigma: float
    num_actions: int
    eta: float = 0.0

    @property
    def alpha_mix(self) -> float:
        """Policy retention factor ``1 - eta tau / (1 - gamma)``."""
        return 1.0 - self.eta * self.tau / (1.0 - self.gamma)

    @property
    def lipschitz(self) -> float:
        return soft_lipschitz_constant(self.gamma, self.tau, self.num_actions)


def recursion_matrix(p: AnalysisParams, variant: str = "regularized"):
    """Return ``(matrix, offset)`` of the linear error recursion.

    ``regularized`` gives the 4x4 ``A(eta)`` with zero offset; ``vanilla`` the
    2x2 ``B(eta)`` with offset ``d(eta)``.
    """
    N, g, tau, s, eta = p.n_agents, p.gamma, p.tau, p.sigma, p.eta
    rN = math.sqrt(N)
    if variant == "regularized":
        if tau <= 0:
            raise ValueError("regularized recursion needs tau > 0")
        a = p.alpha_mix
        M = p.lipschitz
        S = M * rN * (2 * a + (1 - a) * math.sqrt(2 * N) + (1 - a) / tau * rN * M)
        A = np.array([
            [s * a, eta * s / (1 - g), 0.0, 0.0],
            [S * s, (1 + eta * M * rN * s / (1 - g)) * s, (2 + g) * eta * M * N * s / (1 - g), g * eta * M * N * s / (1 - g)],
            [(1 - a) * M, 0.0, (1 - a) * g + a, (1 - a) * g],
            [(2 * g + eta * tau) * M / (1 - g), 0.0, 0.0, a],
        ])
        return A, np.zeros(4)
    if variant == "vanilla":
        J = 2 * (1 + g) * g * rN / (1 - g) ** 2
        B = np.array([
            [s, eta * s / (1 - g)],
            [J * s, s * (1 + (1 + g) * g * rN * eta * s / (1 - g) ** 3)],
        ])
        d = np.array([0.0, (1 + g) * g * N * s * eta / (1 - g) ** 4])
        return B, d
    raise ValueError(f"unknown variant {variant!r}")


def eta1(p: AnalysisParams) -> float:
    """Vanilla step-size threshold (formal form); ``inf`` when ``sigma == 0``."""
    N, g, s = p.n_agents, p.gamma, p.sigma
    if s == 0:
        return math.inf
    return (1 - s) ** 2 * (1 - g) ** 3 / (8 * (1 + g) * g * math.sqrt(N) * s ** 2)


def eta1_informal(p: AnalysisParams) -> float:
    N, g, s = p.n_agents, p.gamma, p.sigma
    if s == 0:
        return math.inf
    return (1 - s) ** 2 * (1 - g) ** 3 / (16 * math.sqrt(N) * s)


def zeta(p: AnalysisParams) -> float:
    N, g, tau, s = p.n_agents, p.gamma, p.tau, p.sigma
    M = p.lipschitz
    S0 = M * math.sqrt(N) * (2 + math.sqrt(2 * N) + M * math.sqrt(N) / tau)
    c = M * N / (1 - g)
    denom = 8 * (tau * S0 * s ** 2 + 10 * M * c * s ** 2 / (1 - g) + (1 - s) ** 2 * tau ** 2 / 16)
    return (1 - g) * (1 - s) ** 2 * tau / denom


def eta0(p: AnalysisParams) -> float:
    """Regularized step-size threshold ``min{(1-gamma)/tau, zeta}``."""
    if p.tau <= 0:
        raise ValueError("eta0 needs tau > 0")
    return min((1 - p.gamma) / p.tau, zeta(p))


def learning_rate_bounds(p: AnalysisParams) -> dict:
    out = {"eta_1": eta1(p), "eta_1_informal": eta1_informal(p)}
    if p.tau > 0:
        out["zeta"] = zeta(p)
        out["eta_0"] = eta0(p)
    return out


def rate_bound(p: AnalysisParams) -> float:
    """Upper bound ``max{1 - tau eta / 2, (3 + sigma) / 4}`` on the linear rate."""
    return max(1 - p.tau * p.eta / 2, (3 + p.sigma) / 4)


def consensus_bound(p: AnalysisParams) -> float:
    """Sup-norm bound on ``log pi_n - log pi_bar`` for vanilla runs from uniform init."""
    N, g, s = p.n_agents, p.gamma, p.sigma
    if s >= 1:
        return math.inf
    return 32 * N * s * p.eta / (3 * (1 - g) ** 4 * (1 - s))


def vanilla_inexact_constant(p: AnalysisParams) -> float:
    """Multiplier of the evaluation error in the inexact vanilla bound."""
    N, g, s, eta = p.n_agents, p.gamma, p.sigma, p.eta
    if s >= 1:
        return math.inf
    rN = math.sqrt(N)
    return 32 * rN * s * eta / ((1 - g) ** 5 * (1 - s) ** 2) * (eta * rN / (1 - g) ** 3 + 1) + 2 / (1 - g) ** 2


def regularized_error_threshold(p: AnalysisParams, eps: float, rho: float | None = None) -> float:
    """Largest evaluation error keeping the regularized Q-gap within ``2 eps``."""
    N, g, s, eta, tau = p.n_agents, p.gamma, p.sigma, p.eta, p.tau
    rho = rate_bound(p) if rho is None else rho
    M = p.lipschitz
    denom = 2 * g * (s * math.sqrt(N) * (2 * (1 - g) + M * math.sqrt(N) * eta) + 2 * g ** 2 + eta * tau)
    return (1 - g) * (1 - rho) * eps / denom


def vanilla_error_threshold(p: AnalysisParams, eps: float) -> float:
    """Largest evaluation error keeping the extra average-gap term below ``eps``."""
    return eps / vanilla_inexact_constant(p)
