"""Robustness measures for spectral clustering.

Computes, for each candidate cluster count k, the smallest pattern-respecting
nonnegativity-preserving perturbation of a graph's weight matrix that makes
the k-th and (k+1)-st Laplacian eigenvalues coalesce.  The minimization runs
either as a full-rank constrained gradient flow or as an equivalent factored
rank-4 flow, wrapped in a Newton-bisection search over the perturbation size.
"""

from .clustering import ClusterAssignment, component_count, kmeans, spectral_clustering
from .flow_full import FlowConfig, StationaryPoint, full_step, integrate_full
from .flow_lowrank import (GradientFactors, LowRankBreakdown, SvsdFactors,
                           gradient_factors, init_factors,
                           inner_iteration_lowrank, splitting_step, tangent_project)
from .graphs import (DisconnectedGraphError, GraphStructureError, Pattern,
                     PatternMatrix, WeightMatrix, build_knn_similarity,
                     compress_halve, generate_sbm, laplacian, laplacian_adjoint,
                     load_matrix_market, n_components, project_pattern,
                     save_matrix_market)
from .objective import GradientBundle, constrained_direction, evaluate
from .outer import (OuterConfig, ReportRow, StabilityReport, min_gap,
                    min_gap_derivative, outer_iteration, select_k,
                    structured_distance)
from .spectra import (EigensolveError, SpectralData, smallest_eigenpairs,
                      spectral_data, spectral_gap)

__version__ = "0.1.0"

__all__ = [
    "ClusterAssignment", "DisconnectedGraphError", "EigensolveError",
    "FlowConfig", "GradientBundle", "GradientFactors", "GraphStructureError",
    "LowRankBreakdown", "OuterConfig", "Pattern", "PatternMatrix", "ReportRow",
    "SpectralData", "StabilityReport", "StationaryPoint", "SvsdFactors",
    "WeightMatrix", "build_knn_similarity", "component_count", "compress_halve",
    "constrained_direction", "evaluate", "full_step", "generate_sbm",
    "gradient_factors", "init_factors", "inner_iteration_lowrank",
    "integrate_full", "kmeans", "laplacian", "laplacian_adjoint",
    "load_matrix_market", "min_gap", "min_gap_derivative", "n_components",
    "outer_iteration", "project_pattern", "save_matrix_market", "select_k",
    "smallest_eigenpairs", "spectral_clustering", "spectral_data",
    "spectral_gap", "splitting_step", "structured_distance", "tangent_project",
]
