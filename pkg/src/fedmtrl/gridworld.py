"""K x K multi-task GridWorld with right/down moves and per-agent reward cells on a path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fednpg import MultiTaskRewards
from .mdp import TabularMdp

RIGHT, DOWN = 0, 1
ASSIGNMENT_MODES = ("contiguous", "round_robin", "shuffled")


def default_path(K: int, seed: int = 0) -> list:
    """Staircase from (0,0) to (K-1,K-1): alternating moves with seeded adjacent swaps."""
    if K < 2:
        raise ValueError("grid size must be at least 2")
    moves = [RIGHT, DOWN] * (K - 1)
    rng = np.random.default_rng(seed)
    for i in rng.integers(0, len(moves) - 1, size=K - 1):
        moves[i], moves[i + 1] = moves[i + 1], moves[i]
    path = [(0, 0)]
    for m in moves:
        i, j = path[-1]
        path.append((i, j + 1) if m == RIGHT else (i + 1, j))
    return path


def default_assignment(path, n_agents: int, mode: str = "contiguous", seed: int = 0) -> tuple:
    """Owner of each path cell after the start, aligned with ``path[1:]``.

    ``contiguous`` cuts the path into nearly equal consecutive runs (earlier agents take
    the remainder); ``round_robin`` cycles through agents; ``shuffled`` is round robin
    over a seeded permutation of the cells.
    """
    m = len(path) - 1
    if n_agents < 1:
        raise ValueError("need at least one agent")
    if mode == "contiguous":
        base, extra = divmod(m, n_agents)
        owners = []
        for n in range(n_agents):
            owners += [n] * (base + (n < extra))
        return tuple(owners)
    if mode == "round_robin":
        return tuple(k % n_agents for k in range(m))
    if mode == "shuffled":
        order = np.random.default_rng(seed).permutation(m)
        owners = [0] * m
        for rank, k in enumerate(order):
            owners[k] = rank % n_agents
        return tuple(owners)
    raise ValueError(f"unknown assignment mode {mode!r}; expected one of {ASSIGNMENT_MODES}")


def _check_path(path, K: int):
    if not path or tuple(path[0]) != (0, 0) or tuple(path[-1]) != (K - 1, K - 1):
        raise ValueError("path must start at (0, 0) and end at (K-1, K-1)")
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        if (i1 - i0, j1 - j0) not in ((0, 1), (1, 0)):
            raise ValueError(f"path step {(i0, j0)} -> {(i1, j1)} is not a single right/down move")


@dataclass(frozen=True)
class GridWorldSpec:
    grid_size: int
    n_agents: int
    gamma: float = 0.99
    path: tuple | None = None
    assignment: tuple | None = None
    assignment_mode: str = "contiguous"
    seed: int = 0

    def __post_init__(self):
        K = int(self.grid_size)
        if K < 2:
            raise ValueError("grid size must be at least 2")
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        path = default_path(K, self.seed) if self.path is None else self.path
        path = tuple((int(i), int(j)) for i, j in path)
        _check_path(path, K)
        owners = self.assignment
        if owners is None:
            owners = default_assignment(path, self.n_agents, self.assignment_mode, self.seed)
        owners = tuple(int(n) for n in owners)
        if len(owners) != len(path) - 1:
            raise ValueError("assignment must give one owner per path cell after the start")
        if any(not 0 <= n < self.n_agents for n in owners):
            raise ValueError("assignment refers to an unknown agent")
        if self.n_agents <= len(owners) and len(set(owners)) != self.n_agents:
            raise ValueError("every agent must own at least one path cell")
        object.__setattr__(self, "path", path)
        object.__setattr__(self, "assignment", owners)

    def state_index(self, cell) -> int:
        i, j = cell
        return i * self.grid_size + j

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid_size, "n_agents": self.n_agents, "gamma": self.gamma,
            "path": [list(c) for c in self.path], "assignment": list(self.assignment),
            "assignment_mode": self.assignment_mode, "seed": self.seed,
        }


def build(spec: GridWorldSpec):
    """Return ``(mdp, rewards, rho)``; ``rho`` is a point mass on the top-left cell."""
    K, N = spec.grid_size, spec.n_agents
    S = K * K
    P = np.zeros((S, 2, S))
    succ = np.empty((S, 2), dtype=np.int64)
    moved = np.zeros((S, 2), dtype=bool)
    for i in range(K):
        for j in range(K):
            s = i * K + j
            for a, (ni, nj) in ((RIGHT, (i, j + 1)), (DOWN, (i + 1, j))):
                if ni < K and nj < K:
                    succ[s, a] = ni * K + nj
                    moved[s, a] = True
                else:
                    succ[s, a] = s
                P[s, a, succ[s, a]] = 1.0
    owner = np.full(S, -1)
    for cell, n in zip(spec.path[1:], spec.assignment):
        owner[spec.state_index(cell)] = n
    r = np.zeros((N, S, 2))
    for n in range(N):
        r[n] = (owner[succ] == n) & moved
    rho = np.zeros(S)
    rho[0] = 1.0
    return TabularMdp(P, spec.gamma), MultiTaskRewards(r), rho
