"""Federated natural policy gradient and actor-critic for multi-task tabular RL."""

from .graph import MixingMatrix, fully_connected, standard_ring
from .mdp import Policy, TabularMdp, optimal_values, soft_q, soft_v

__version__ = "0.1.0"
