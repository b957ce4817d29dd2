"""Multigrid under random component faults: cycles, fault models and analysis."""

from .analysis import (HypothesisError, LyapunovEstimate, assemble_iteration_matrix,
                       estimate_lyapunov, fit_scaling_exponent, replica_bound_two_grid,
                       wcycle_bound)
from .cycle import CycleConfig, OutcomeCounters, mg_cycle, protect_prolongation, replicate_detect
from .faults import FaultModel, FaultStreams, sample_mask
from .grid import GridHierarchy, ProblemSpec, build_hierarchy
from .harness import ExperimentConfig, load_config

__version__ = "0.1.0"

__all__ = ["HypothesisError", "LyapunovEstimate", "assemble_iteration_matrix",
           "estimate_lyapunov", "fit_scaling_exponent", "replica_bound_two_grid", "wcycle_bound",
           "CycleConfig", "OutcomeCounters", "mg_cycle", "protect_prolongation",
           "replicate_detect", "FaultModel", "FaultStreams", "sample_mask", "GridHierarchy",
           "ProblemSpec", "build_hierarchy", "ExperimentConfig", "load_config"]
