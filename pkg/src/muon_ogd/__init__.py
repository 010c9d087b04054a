"""Spectral-norm constrained orthogonal gradient steps (Muon-OGD) and baselines."""
from .constraints import (
    EMPTY,
    General,
    LowRank,
    ProtectedRankPolicy,
    constraint_residual,
    extract_lowrank_constraints,
    frobenius_ogd_step,
    project,
)
from .dualsolver import DualState, SolverConfig, StepResult, dual_objective, dual_subgradient, solve_step, solve_step_exact
from .errors import DimensionError, DomainError, MuonOGDError, NumericalError, StateError
from .matlin import nuclear_norm, spectral_norm
from .msign import MsignConfig, msign_error, msign_exact, ns5
from .optim import Kind, OptimizerConfig, OptimizerState, ParamGroup, step

__version__ = "0.1.0"

__all__ = [
    "EMPTY", "General", "LowRank", "ProtectedRankPolicy", "constraint_residual", "extract_lowrank_constraints",
    "frobenius_ogd_step", "project", "DualState", "SolverConfig", "StepResult", "dual_objective",
    "dual_subgradient", "solve_step", "solve_step_exact", "DimensionError", "DomainError", "MuonOGDError",
    "NumericalError", "StateError", "nuclear_norm", "spectral_norm", "MsignConfig", "msign_error",
    "msign_exact", "ns5", "Kind", "OptimizerConfig", "OptimizerState", "ParamGroup", "step",
]
