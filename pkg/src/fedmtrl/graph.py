"""Gossip mixing matrices, their validation and spectral radius."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STOCH_ATOL = 1e-10


def spectral_radius(weights) -> float:
    """``|| W - (1/N) 1 1^T ||_2`` (largest singular value)."""
    W = np.asarray(weights, dtype=float)
    n = W.shape[0]
    return float(np.linalg.norm(W - np.full((n, n), 1.0 / n), ord=2))


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    weights: np.ndarray
    name: str = "explicit"
    row_stochastic: bool = field(init=False)
    col_stochastic: bool = field(init=False)
    symmetric: bool = field(init=False)
    sigma: float = field(init=False)

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 1:
            raise ValueError(f"mixing matrix must be square, got shape {W.shape}")
        if not np.all(np.isfinite(W)) or np.any(W < 0) or np.any(W > 1):
            raise ValueError("mixing weights must lie in [0, 1]")
        row = bool(np.max(np.abs(W.sum(axis=1) - 1.0)) <= STOCH_ATOL)
        if not row:
            raise ValueError("mixing matrix rows must sum to 1")
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "row_stochastic", row)
        object.__setattr__(self, "col_stochastic", bool(np.max(np.abs(W.sum(axis=0) - 1.0)) <= STOCH_ATOL))
        object.__setattr__(self, "symmetric", bool(np.max(np.abs(W - W.T)) <= STOCH_ATOL))
        object.__setattr__(self, "sigma", spectral_radius(W))

    @property
    def n_agents(self) -> int:
        return self.weights.shape[0]

    @property
    def doubly_stochastic(self) -> bool:
        return self.row_stochastic and self.col_stochastic

    def mix(self, x: np.ndarray) -> np.ndarray:
        """Apply ``W`` along the leading (agent) axis."""
        return np.tensordot(self.weights, x, axes=(1, 0))

    def summary(self) -> dict:
        return {
            "name": self.name,
            "n_agents": self.n_agents,
            "row_stochastic": self.row_stochastic,
            "col_stochastic": self.col_stochastic,
            "symmetric": self.symmetric,
            "doubly_stochastic": self.doubly_stochastic,
            "sigma": self.sigma,
        }


def contraction_check(W: MixingMatrix, x, atol: float = 1e-12) -> bool:
    """Whether ``||Wx - mean(x) 1|| <= sigma ||x - mean(x) 1|| + atol``."""
    x = np.asarray(x, dtype=float)
    mean = x.mean()
    lhs = np.linalg.norm(W.weights @ x - mean)
    rhs = W.sigma * np.linalg.norm(x - mean)
    return bool(lhs <= rhs + atol)


def fully_connected(n: int) -> MixingMatrix:
    return MixingMatrix(np.full((n, n), 1.0 / n), name="full")


def standard_ring(n: int) -> MixingMatrix:
    """Agent ``i`` keeps half its weight and takes half from agent ``i+1`` (cyclically)."""
    if n == 1:
        return MixingMatrix(np.ones((1, 1)), name="ring")
    W = np.zeros((n, n))
    for i in range(n):
        W[i, i] += 0.5
        W[i, (i + 1) % n] += 0.5
    return MixingMatrix(W, name="ring")


def _check_k(n: int, k: int):
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")


def k_neighbor_equal(n: int, k: int) -> MixingMatrix:
    """Weight ``1/(k+1)`` on self and each of the ``k`` cyclic successors."""
    _check_k(n, k)
    W = np.zeros((n, n))
    for i in range(n):
        for j in range(k + 1):
            W[i, (i + j) % n] = 1.0 / (k + 1)
    return MixingMatrix(W, name="k_neighbor_equal")


def k_neighbor_random(n: int, k: int, seed: int = 0) -> MixingMatrix:
    """Same support as :func:`k_neighbor_equal`, random positive weights per row."""
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    W = np.zeros((n, n))
    for i in range(n):
        w = rng.uniform(0.0, 1.0, size=k + 1) + 1e-3
        w /= w.sum()
        for j in range(k + 1):
            W[i, (i + j) % n] = w[j]
    return MixingMatrix(W, name="k_neighbor_random")


def metropolis_from_edges(n: int, edges) -> MixingMatrix:
    """Metropolis-Hastings weights for an undirected graph (doubly stochastic, symmetric)."""
    adj = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        if i == j:
            continue
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) out of range for {n} nodes")
        adj[i, j] = adj[j, i] = True
    deg = adj.sum(axis=1)
    W = np.zeros((n, n))
    for i in range(n):
        for j in np.flatnonzero(adj[i]):
            W[i, j] = 1.0 / (1 + max(deg[i], deg[j]))
        W[i, i] = 1.0 - W[i].sum()
    return MixingMatrix(W, name="metropolis")


def is_connected(W: MixingMatrix) -> bool:
    adj = (W.weights > 0) | (W.weights.T > 0)
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == W.n_agents


def from_spec(spec: dict, n_agents: int) -> MixingMatrix:
    """Build a topology from a config mapping ``{type: ..., params...}``."""
    spec = dict(spec)
    kind = spec.pop("type", "ring")
    if kind == "ring":
        W = standard_ring(n_agents)
    elif kind == "full":
        W = fully_connected(n_agents)
    elif kind == "k_neighbor_equal":
        W = k_neighbor_equal(n_agents, int(spec.pop("k")))
    elif kind == "k_neighbor_random":
        W = k_neighbor_random(n_agents, int(spec.pop("k")), int(spec.pop("seed", 0)))
    elif kind == "metropolis":
        W = metropolis_from_edges(n_agents, [tuple(e) for e in spec.pop("edges")])
    elif kind == "explicit":
        W = MixingMatrix(np.asarray(spec.pop("matrix"), dtype=float))
        if W.n_agents != n_agents:
            raise ValueError(f"explicit matrix is {W.n_agents}x{W.n_agents}, expected {n_agents} agents")
    else:
        raise ValueError(f"unknown topology type {kind!r}")
    if spec:
        raise ValueError(f"unknown topology parameters for {kind!r}: {sorted(spec)}")
    return W
