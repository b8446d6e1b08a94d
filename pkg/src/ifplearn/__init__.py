"""Optimal savings under transition uncertainty with Bayesian learning.

Households know the values of a finite Markov state but not its transition
matrix; they hold a posterior over finitely many candidate kernels. The
package solves the belief-augmented consumption problem by an endogenous grid
method, certifies the stability condition that guarantees a unique solution,
checks structural properties of the solved policy, and simulates panels.
"""

from .belief import (Belief, SimplexGrid, bayes_update, bayes_update_batch, build_simplex_grid,
                     mixture_kernel, project_to_grid)
from .errors import (CertificationError, ConfigError, ConvergenceError, DomainError, IfpError,
                     LearningError, NumericalError, ResourceError)
from .model import (CalibratedHouseholdModel, CandidateSet, CrraUtility, StateShockMap,
                    discretize_model)
from .quadrature import QuadratureRule, gauss_hermite_normal
from .solver import (PolicyTable, SolverContext, __version__, build_context, build_savings_grid,
                     load_policy, save_policy, solve)
from .stability import StabilityReport, certify, spectral_radius, upper_envelope
from .analysis import PolicyDiagnostics, brute_force_policy, diagnose, euler_residuals
from .simulate import (PairedStatistics, PathStatistics, SimulationConfig, compare_learning_benchmark,
                       simulate_panel)
from .config import RunConfig, load_config

__all__ = [
    "Belief", "SimplexGrid", "bayes_update", "bayes_update_batch", "build_simplex_grid",
    "mixture_kernel", "project_to_grid",
    "CertificationError", "ConfigError", "ConvergenceError", "DomainError", "IfpError",
    "LearningError", "NumericalError", "ResourceError",
    "CalibratedHouseholdModel", "CandidateSet", "CrraUtility", "StateShockMap", "discretize_model",
    "QuadratureRule", "gauss_hermite_normal",
    "PolicyTable", "SolverContext", "__version__", "build_context", "build_savings_grid",
    "load_policy", "save_policy", "solve",
    "StabilityReport", "certify", "spectral_radius", "upper_envelope",
    "PolicyDiagnostics", "brute_force_policy", "diagnose", "euler_residuals",
    "PairedStatistics", "PathStatistics", "SimulationConfig", "compare_learning_benchmark",
    "simulate_panel",
    "RunConfig", "load_config",
]
