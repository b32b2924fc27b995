"""Experiment harness: configs, problem builders, metric files and the CLI."""

from .config import ConfigError, ExperimentConfig, parse_config
from .problems import Problem, build_problem, load_mdp, random_mdp, save_mdp
