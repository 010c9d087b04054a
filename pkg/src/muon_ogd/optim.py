"""Optimizer steps over named parameters.

Five update rules share one momentum buffer per parameter:

* ``sgd``               theta <- theta - eta * G
* ``muon``              theta <- theta - eta * ns5(G)
* ``frob_ogd``          theta <- theta - eta * (G - Proj_C(G))
* ``muon_ogd``          theta <- theta + solve_step(G, C).delta   (general C_i)
* ``muon_ogd_lowrank``  same, with bilinear U^T delta V = 0 constraints

Parameters flagged ``apply_constrained=False`` (biases, vectors) always take
the plain momentum-SGD rule with ``vector_lr``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .constraints import EMPTY, ConstraintSet, ProtectedRankPolicy, check_compatible, frobenius_ogd_step
from .dualsolver import DualState, SolverConfig, StepResult, TraceSink, solve_step, solve_step_exact
from .errors import DimensionError
from .msign import MsignConfig, ns5


class Kind(str, enum.Enum):
    SGD = "sgd"
    MUON = "muon"
    FROB_OGD = "frob_ogd"
    MUON_OGD = "muon_ogd"
    MUON_OGD_LOWRANK = "muon_ogd_lowrank"

    @property
    def constrained(self) -> bool:
        return self in (Kind.FROB_OGD, Kind.MUON_OGD, Kind.MUON_OGD_LOWRANK)


@dataclass(frozen=True)
class ParamGroup:
    name: str
    weight: np.ndarray
    constraints: ConstraintSet = EMPTY
    apply_constrained: bool = True

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if self.apply_constrained:
            if w.ndim != 2:
                raise DimensionError(f"{self.name}: constrained parameters must be matrices, got shape {w.shape}")
            check_compatible(self.constraints, w.shape)
        object.__setattr__(self, "weight", w)


@dataclass(frozen=True)
class OptimizerConfig:
    """The optimizer block of an experiment config. Defaults follow the
    large-model reference settings (step 5e-3, dual step 1e-4, protected rank
    0.08 of min(m, n) capped at 48); toy problems need a larger dual step.

    ``exact`` solves every constrained step with :func:`solve_step_exact`;
    ``exact_msign`` keeps the ``t_in``-iteration loop but swaps ns5 for the SVD.
    """

    kind: Kind = Kind.MUON_OGD_LOWRANK
    eta: float = 5e-3
    eta_dual: float = 1e-4
    beta: float = 0.95
    t_in: int = 2
    rank_fraction: float = 0.08
    max_rank: int = 48
    ns_steps: int = 5
    vector_lr: float = 1e-3
    exact: bool = False
    exact_msign: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.vector_lr > 0:
            raise ValueError("vector_lr must be positive")
        self.solver_config()
        self.rank_policy()

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            eta=self.eta,
            eta_dual=self.eta_dual,
            t_in=self.t_in,
            msign=MsignConfig(ns_steps=self.ns_steps),
            exact_msign=self.exact or self.exact_msign,
        )

    def rank_policy(self) -> ProtectedRankPolicy:
        return ProtectedRankPolicy(self.rank_fraction, self.max_rank)


@dataclass
class OptimizerState:
    kind: Kind
    cfg: SolverConfig
    beta: float = 0.95
    vector_lr: float = 1e-3
    exact: bool = False
    momentum: dict = field(default_factory=dict)
    dual: dict = field(default_factory=dict)
    trace: TraceSink | None = None
    t: int = 0
    last_steps: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimizerConfig, trace: TraceSink | None = None) -> "OptimizerState":
        return cls(kind=cfg.kind, cfg=cfg.solver_config(), beta=cfg.beta, vector_lr=cfg.vector_lr,
                   exact=cfg.exact, trace=trace)

    def init_params(self, params: Sequence[ParamGroup]) -> None:
        for p in params:
            self.momentum.setdefault(p.name, np.zeros_like(p.weight))

    def reset_dual(self, name: str | None = None) -> None:
        if name is None:
            self.dual.clear()
        else:
            self.dual.pop(name, None)


def accumulate_momentum(state: OptimizerState, grads: Mapping[str, np.ndarray]) -> OptimizerState:
    """``G <- beta * G + grad`` for every named gradient."""
    for name, grad in grads.items():
        if name not in state.momentum:
            raise KeyError(f"unknown parameter {name!r}")
        buf = state.momentum[name]
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != buf.shape:
            raise DimensionError(f"{name}: gradient shape {grad.shape} != parameter shape {buf.shape}")
        state.momentum[name] = state.beta * buf + grad
    return state


def _constrained_delta(state: OptimizerState, p: ParamGroup, g: np.ndarray) -> np.ndarray:
    cfg = state.cfg
    kind = state.kind
    if kind is Kind.SGD:
        return -cfg.eta * g
    if kind is Kind.MUON:
        return -cfg.eta * ns5(g, cfg.msign)
    if kind is Kind.FROB_OGD:
        return frobenius_ogd_step(g, p.constraints, cfg.eta)
    warm = state.dual.get(p.name)
    if warm is not None and not warm.matches(p.constraints):
        warm = None
    if state.exact:
        res: StepResult = solve_step_exact(g, p.constraints, cfg)
    else:
        res = solve_step(g, p.constraints, warm, cfg, trace=state.trace, step=state.t)
    state.dual[p.name] = res.dual
    state.last_steps[p.name] = res
    return res.delta


def step(
    state: OptimizerState,
    params: Sequence[ParamGroup],
    grads: Mapping[str, np.ndarray],
) -> tuple[list[ParamGroup], OptimizerState]:
    """Accumulate momentum and apply one update to every parameter that has a gradient."""
    state.init_params(params)
    accumulate_momentum(state, grads)
    state.last_steps.clear()
    out = []
    for p in params:
        if p.name not in grads:
            out.append(p)
            continue
        g = state.momentum[p.name]
        if p.apply_constrained:
            delta = _constrained_delta(state, p, g)
        else:
            delta = -state.vector_lr * g
        out.append(replace(p, weight=p.weight + delta))
    state.t += 1
    return out, state
