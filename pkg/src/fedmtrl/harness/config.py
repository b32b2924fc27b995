"""Experiment configuration: TOML/JSON loading, strict validation, dotted overrides."""

import copy
import dataclasses
import itertools
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ALGORITHMS = ("fednpg", "fednpg-reg", "fednac")


class ConfigError(ValueError):
    pass


@dataclass
class GridProblem:
    grid_size: int
    n_agents: int
    gamma: float = 0.99
    assignment_mode: str = "contiguous"
    path: Optional[list] = None
    assignment: Optional[list] = None
    seed: int = 0  # path jitter; independent of the run seed
    type: str = "gridworld"


@dataclass
class RandomProblem:
    num_states: int
    num_actions: int
    n_agents: int
    gamma: float = 0.9
    seed: Optional[int] = None  # None: the run seed
    type: str = "random"


@dataclass
class FileProblem:
    path: str
    type: str = "file"


@dataclass
class NpgParams:
    eta: float
    iterations: int
    tau: float = 0.0
    eval: str = "exact"
    tracking: bool = True
    diagnostics: list = field(default_factory=lambda: ["consensus"])


@dataclass
class NacParams:
    actor_iterations: int
    critic_iterations: int
    actor_lr: float
    critic_lr: Optional[float] = None
    critic_lr_rule: str = "squared"
    features: Union[str, dict] = "one_hot"
    critic_diagnostics: bool = True


@dataclass
class ExperimentConfig:
    algorithm: str
    problem: Union[GridProblem, RandomProblem, FileProblem]
    params: Union[NpgParams, NacParams]
    topology: dict = field(default_factory=lambda: {"type": "ring"})
    seed: int = 0
    repeat: int = 1
    out: Optional[str] = None
    sweep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PROBLEMS = {"gridworld": GridProblem, "random": RandomProblem, "file": FileProblem}


def _coerce(value, typ, where):
    origin = typing.get_origin(typ)
    if origin is Union:
        args = typing.get_args(typ)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{where}: bad value {value!r}")
    if typ is bool:
        if isinstance(value, bool):
            return value
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif typ is str:
        if isinstance(value, str):
            return value
    elif typ is list or origin is list:
        if isinstance(value, (list, tuple)):
            return list(value)
    elif typ is dict or origin is dict:
        if isinstance(value, dict):
            return dict(value)
    else:
        return value
    raise ConfigError(f"{where}: expected {getattr(typ, '__name__', typ)}, got {value!r}")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{where}.{f.name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{where}: missing required key {f.name!r}")
    return cls(**kwargs)


def parse_config(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data)
    if not isinstance(data, dict):
        raise ConfigError("config must be a table")
    top = {"algorithm", "problem", "params", "topology", "seed", "repeat", "out", "sweep"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    algorithm = data.get("algorithm")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    prob = data.get("problem")
    if not isinstance(prob, dict) or prob.get("type") not in PROBLEMS:
        raise ConfigError(f"problem.type must be one of {sorted(PROBLEMS)}")
    problem = _build(PROBLEMS[prob["type"]], prob, "problem")
    params_cls = NacParams if algorithm == "fednac" else NpgParams
    params = _build(params_cls, data.get("params", {}), "params")
    if algorithm == "fednpg" and params.tau != 0:
        raise ConfigError("algorithm fednpg needs tau = 0; use fednpg-reg")
    if algorithm == "fednpg-reg" and not params.tau > 0:
        raise ConfigError("algorithm fednpg-reg needs tau > 0")
    rest = {k: data[k] for k in ("topology", "seed", "repeat", "out", "sweep") if k in data}
    cfg = _build(ExperimentConfig, {"algorithm": algorithm, "problem": problem, "params": params, **rest}, "config")
    if cfg.seed < 0:
        raise ConfigError("seed must be nonnegative")
    if cfg.repeat < 1:
        raise ConfigError("repeat must be at least 1")
    if "type" not in cfg.topology:
        cfg.topology["type"] = "ring"
    for key, values in cfg.sweep.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key} must be a non-empty list")
    return cfg


def load_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text)


def parse_value(text: str):
    """Interpret an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_dotted(data: dict, key: str, value):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a table")
    node[parts[-1]] = value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} must look like key=value")
        set_dotted(data, key.strip(), parse_value(value.strip()))
    return data


def sweep_cells(data: dict):
    """Yield ``(axis_values, cell_config_dict)`` over the cross product of ``sweep``."""
    axes = data.get("sweep", {})
    keys = sorted(axes)
    base = {k: v for k, v in data.items() if k != "sweep"}
    for combo in itertools.product(*(axes[k] for k in keys)):
        cell = copy.deepcopy(base)
        for k, v in zip(keys, combo):
            set_dotted(cell, k, v)
        yield dict(zip(keys, combo)), cell
