"""Benchmark problem generators."""

from .mfg import (MfgSpec, MfgSystem, exact_lower_targets, make_random_mfg, mfg_metrics,
                  mfg_operator_system, project_simplex, softmax_policy)
from .nested_linear import decoupled_system, make_nested_linear

__all__ = [
    "MfgSpec", "MfgSystem", "decoupled_system", "exact_lower_targets", "make_nested_linear",
    "make_random_mfg", "mfg_metrics", "mfg_operator_system", "project_simplex", "softmax_policy",
]
