"""Problem instances: random MDPs, GridWorld and MDP files."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..fednpg import MultiTaskRewards
from ..gridworld import GridWorldSpec, build
from ..mdp import TabularMdp
from .config import ConfigError, FileProblem, GridProblem, RandomProblem


@dataclass(eq=False)
class Problem:
    mdp: TabularMdp
    rewards: MultiTaskRewards
    rho: np.ndarray
    meta: dict = field(default_factory=dict)


def random_mdp(num_states: int, num_actions: int, n_agents: int, seed: int, gamma: float = 0.9):
    """Dirichlet(1,...,1) transition rows and i.i.d. uniform rewards per agent."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    r = rng.uniform(0.0, 1.0, size=(n_agents, num_states, num_actions))
    return TabularMdp(P, gamma), MultiTaskRewards(r)


def save_mdp(path, mdp: TabularMdp, rewards: MultiTaskRewards, rho=None):
    doc = {"num_states": mdp.num_states, "num_actions": mdp.num_actions, "gamma": mdp.gamma,
           "transition": mdp.transition.tolist(), "rewards": rewards.tables.tolist()}
    if rho is not None:
        doc["rho"] = np.asarray(rho).tolist()
    Path(path).write_text(json.dumps(doc))


def load_mdp(path):
    """Read an MDP document; ``rewards`` is one (S, A) table or a per-agent list of them."""
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - {"num_states", "num_actions", "gamma", "transition", "rewards", "rho"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    mdp = TabularMdp(np.asarray(doc["transition"], dtype=float), float(doc["gamma"]))
    for key, size in (("num_states", mdp.num_states), ("num_actions", mdp.num_actions)):
        if key in doc and doc[key] != size:
            raise ConfigError(f"{path}: {key}={doc[key]} does not match the transition table ({size})")
    rewards = MultiTaskRewards(np.asarray(doc["rewards"], dtype=float))
    if rewards.tables.shape[1:] != (mdp.num_states, mdp.num_actions):
        raise ConfigError(f"{path}: reward shape {rewards.tables.shape} does not match the MDP")
    rho = doc.get("rho")
    rho = np.full(mdp.num_states, 1.0 / mdp.num_states) if rho is None else np.asarray(rho, dtype=float)
    return mdp, rewards, rho


def build_problem(problem, seed: int) -> Problem:
    if isinstance(problem, GridProblem):
        spec = GridWorldSpec(problem.grid_size, problem.n_agents, problem.gamma,
                             None if problem.path is None else tuple(map(tuple, problem.path)),
                             None if problem.assignment is None else tuple(problem.assignment),
                             problem.assignment_mode, problem.seed)
        mdp, rewards, rho = build(spec)
        return Problem(mdp, rewards, rho, {"gridworld": spec.to_dict()})
    if isinstance(problem, RandomProblem):
        s = seed if problem.seed is None else problem.seed
        mdp, rewards = random_mdp(problem.num_states, problem.num_actions, problem.n_agents, s, problem.gamma)
        return Problem(mdp, rewards, np.full(mdp.num_states, 1.0 / mdp.num_states), {"mdp_seed": s})
    if isinstance(problem, FileProblem):
        mdp, rewards, rho = load_mdp(problem.path)
        return Problem(mdp, rewards, rho, {"file": problem.path})
    raise ConfigError(f"unsupported problem {problem!r}")
