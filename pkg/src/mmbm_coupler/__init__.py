"""Pathwise coupling of Markov-modulated Brownian motion with stochastic
fluid processes, strong-convergence diagnostics, and first-passage
generators via the fluid Riccati equation."""

__version__ = "0.1.0"

from .errors import MmbmError
from .model import FlipFlopLevel, LevelSchedule, MmbmParams, build_level, load_params, validate_params
from .sampling import substream
from .coupling import (
    CoupledBundle,
    build_bundle,
    build_sfp_path,
    coarsen,
    discrepancy,
    eval_sfp,
    simulate_bundle,
)
from .passage import compute_u, level_independence, passage_matrix, quadratic_residual, solve_passage, solve_psi

__all__ = [
    "MmbmError",
    "FlipFlopLevel",
    "LevelSchedule",
    "MmbmParams",
    "build_level",
    "load_params",
    "validate_params",
    "substream",
    "CoupledBundle",
    "build_bundle",
    "build_sfp_path",
    "coarsen",
    "discrepancy",
    "eval_sfp",
    "simulate_bundle",
    "compute_u",
    "level_independence",
    "passage_matrix",
    "quadratic_residual",
    "solve_passage",
    "solve_psi",
]
