"""PAC learning for contextual bandits with sparse rewards."""

from .ccsb import CcsbConfig, run_ccsb
from .core import (
    Environment,
    Policy,
    PolicyClass,
    RngStream,
    Sparsity,
    SparseEnvSpec,
    best_policy_value,
    make_lower_bound_env,
    make_planted_env,
    make_sparse_env,
    policy_value_exact,
)
from .lve import LveConfig, run_lve
from .report import RunReport

__all__ = [
    "CcsbConfig",
    "Environment",
    "LveConfig",
    "Policy",
    "PolicyClass",
    "RngStream",
    "RunReport",
    "SparseEnvSpec",
    "Sparsity",
    "best_policy_value",
    "make_lower_bound_env",
    "make_planted_env",
    "make_sparse_env",
    "policy_value_exact",
    "run_ccsb",
    "run_lve",
]
