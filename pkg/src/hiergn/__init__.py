"""Hierarchical graph networks for learned particle simulation."""
from .errors import ConfigError, FormatError, InvalidInputError, SimulationOverflowError
from .hierarchy import HierGraph, build_hier_graph, choose_depth, interaction_coverage_check
from .models import GraphSpec, NBodyGN
from .sim import ParticleSystem, SimConfig, Trajectory, init_system, simulate_trajectory

__version__ = "0.1.0"
