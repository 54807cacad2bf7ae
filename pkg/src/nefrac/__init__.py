"""Effective population size for decomposable structured-population models.

The library takes a model supplied as an explicit (F, C, sigma)
decomposition of a structured-population SDE, computes its ecological
equilibrium, reproductive values and effective population size
N_e = N / Sigma^2, and provides simulators (fraction SDE, total-population
SDE, Wright-Fisher reference, exact jump processes, structured coalescent)
plus a statistical harness that verifies the rescaled fraction dynamics
against the Wright-Fisher limit.
"""

__version__ = "0.1.0"

from .equilibrium import EquilibriumReport, analyze
from .model import DecomposedModel, build_sigma_from_a, check_assumptions
from .types import SimulationConfig, Trajectory, TypeSpace
from .zoo import get_model, local_branching, logistic_singleton, lotka_volterra, two_sex

__all__ = [
    "DecomposedModel",
    "EquilibriumReport",
    "SimulationConfig",
    "Trajectory",
    "TypeSpace",
    "analyze",
    "build_sigma_from_a",
    "check_assumptions",
    "get_model",
    "local_branching",
    "logistic_singleton",
    "lotka_volterra",
    "two_sex",
    "__version__",
]
