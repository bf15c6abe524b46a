"""Simulation of online accept/reject policies for multi-resource allocation."""

__version__ = "0.1.0"

from .model import (ConfigurationError, DomainError, InstanceSpec, PointMass, QueryType, SamplePath,
                    TruncatedLinear, Uniform, build_instance, example2, make_distribution, sample_path,
                    single_resource_uniform)
from .offline import OfflineResult, dual_sandwich_check, offline_integer, offline_lp
from .policies import EstimatorConfig, Policy, PolicyState, decide, estimate_log, estimate_log2, run_policy
from .solvers import DualDomain, FluidSolution, SolverError, minimize_dual, solve_fluid, solve_semifluid

__all__ = [
    "ConfigurationError", "DomainError", "InstanceSpec", "PointMass", "QueryType", "SamplePath",
    "TruncatedLinear", "Uniform", "build_instance", "example2", "make_distribution", "sample_path",
    "single_resource_uniform", "OfflineResult", "dual_sandwich_check", "offline_integer", "offline_lp",
    "EstimatorConfig", "Policy", "PolicyState", "decide", "estimate_log", "estimate_log2", "run_policy",
    "DualDomain", "FluidSolution", "SolverError", "minimize_dual", "solve_fluid", "solve_semifluid",
]
