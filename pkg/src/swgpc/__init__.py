"""Win-odds estimators for stepped-wedge cluster randomised trials.

Modules:
    design      trial layout, endpoint hierarchies, individual-level datasets
    datagen     logistic / continuous mixed-model data generation
    gpc         generalized pairwise comparisons and win statistics
    lmm         REML linear mixed models with Kenward-Roger inference
    pim         probabilistic index models with sandwich variance
    estimators  the a1, a2, b1-b4, c1, c2 analysis methods
    harness     replicated scenarios and operating characteristics
"""

from .datagen import (BinaryEndpointParams, ContinuousEndpointParams, RngSpec, simulate,
                      simulate_binary, simulate_continuous, variance_components)
from .design import (Dataset, DesignError, EndpointHierarchy, EndpointSpec, TrialDesign,
                     make_uniform_design)
from .estimators import METHODS, FitResult, MethodError, run_method
from .gpc import WinStats, cluster_period_table, compare_pair, win_stats
from .harness import Scenario, run_scenario, run_scenarios

__version__ = "0.1.0"

__all__ = [
    "BinaryEndpointParams", "ContinuousEndpointParams", "Dataset", "DesignError",
    "EndpointHierarchy", "EndpointSpec", "FitResult", "METHODS", "MethodError", "RngSpec",
    "Scenario", "TrialDesign", "WinStats", "cluster_period_table", "compare_pair",
    "make_uniform_design", "run_method", "run_scenario", "run_scenarios", "simulate",
    "simulate_binary", "simulate_continuous", "variance_components", "win_stats",
]
