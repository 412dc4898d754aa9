"""Tabular two-time-scale natural actor-critic with epsilon-greedy exploration."""
from .mdp_core import Mdp, Policy, build_counterexample, build_random_ergodic
from .exact import exact_q, exact_v, solve_optimal
from .nac import Schedule, preset, run

__version__ = "0.1.0"
