"""Spectral-norm constrained steepest descent with linear non-interference constraints.

The step solves::

    min_D <G, D>   s.t.  ||D||_2 <= eta,  <C_i, D> = 0

through its dual ``min_lam f(lam) = ||G + sum_i lam_i C_i||_*``. For fixed
multipliers the primal minimizer is ``-eta * msign(H)`` with
``H = G + sum_i lam_i C_i``, and ``d f / d lam_i = <C_i, msign(H)>``.
For a :class:`~muon_ogd.constraints.LowRank` set the multipliers form a
``k x k`` matrix and the correction is ``U Lam V^T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np

from .constraints import (
    ConstraintSet,
    LowRank,
    check_compatible,
    constraint_residual,
    lowrank_as_general,
)
from .errors import DimensionError, NumericalError
from .matlin import as_matrix, matrix_from_json, matrix_to_json, nuclear_norm
from .msign import MsignConfig, msign_exact, ns5

TraceSink = Callable[[dict], None]


@dataclass(frozen=True)
class DualState:
    """Dual multipliers: shape ``(k,)`` for General sets, ``(k, k)`` for LowRank."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim not in (1, 2) or (vals.ndim == 2 and vals.shape[0] != vals.shape[1]):
            raise DimensionError(f"dual values must be a vector or square matrix, got {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros_for(cls, cs: ConstraintSet) -> "DualState":
        if isinstance(cs, LowRank):
            return cls(np.zeros((cs.k, cs.k)))
        return cls(np.zeros(cs.k))

    def matches(self, cs: ConstraintSet) -> bool:
        if isinstance(cs, LowRank):
            return self.values.shape == (cs.k, cs.k)
        return self.values.shape == (cs.k,)

    def to_json(self) -> dict:
        if self.values.ndim == 1:
            return {"variant": "vector", "lambda": self.values.tolist()}
        k = self.values.shape[0]
        if k == 0:
            return {"variant": "matrix", "l": {"rows": 0, "cols": 0, "entries": []}}
        return {"variant": "matrix", "l": matrix_to_json(self.values)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "DualState":
        if obj["variant"] == "vector":
            return cls(np.asarray(obj["lambda"], dtype=np.float64).reshape(-1))
        if obj["l"]["rows"] == 0:
            return cls(np.zeros((0, 0)))
        return cls(matrix_from_json(obj["l"]))


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of one constrained step.

    ``exact_msign`` swaps Newton-Schulz for the SVD polar factor everywhere in
    the step (inner loop and primal recovery).
    """

    eta: float = 5e-3
    eta_dual: float = 1e-4
    t_in: int = 2
    msign: MsignConfig = field(default_factory=MsignConfig)
    early_stop_tol: float = 0.0
    exact_msign: bool = False

    def __post_init__(self):
        if not self.eta > 0 or not self.eta_dual > 0:
            raise ValueError("eta and eta_dual must be positive")
        if int(self.t_in) != self.t_in or self.t_in < 1:
            raise ValueError(f"t_in must be a positive integer, got {self.t_in}")
        if self.early_stop_tol < 0:
            raise ValueError("early_stop_tol must be non-negative")


@dataclass(frozen=True)
class StepResult:
    delta: np.ndarray
    dual: DualState
    h: np.ndarray
    residual: float
    inner_iters: int = 0

    def to_json(self) -> dict:
        return {
            "delta": matrix_to_json(self.delta),
            "dual": self.dual.to_json(),
            "h": matrix_to_json(self.h),
            "residual": self.residual,
            "inner_iters": self.inner_iters,
        }


def correction(cs: ConstraintSet, dual: DualState, shape: tuple[int, int]) -> np.ndarray:
    """``sum_i lam_i C_i`` (General) or ``U Lam V^T`` (LowRank)."""
    if not dual.matches(cs):
        raise DimensionError(f"dual shape {dual.values.shape} does not fit a set with k={cs.k}")
    if cs.k == 0:
        return np.zeros(shape)
    if isinstance(cs, LowRank):
        return cs.u @ dual.values @ cs.v.T
    return np.tensordot(dual.values, np.stack(cs.c), axes=1)


def shifted(g: np.ndarray, cs: ConstraintSet, dual: DualState) -> np.ndarray:
    if cs.k == 0:
        return g
    return g + correction(cs, dual, g.shape)


def _sign(h: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    return msign_exact(h, cfg.msign) if cfg.exact_msign else ns5(h, cfg.msign)


def _pair(cs: ConstraintSet, s: np.ndarray) -> np.ndarray:
    """Constraint-space image of ``s``: ``[<C_i, s>]_i`` or ``U^T s V``."""
    if isinstance(cs, LowRank):
        return cs.u.T @ s @ cs.v
    if cs.k == 0:
        return np.zeros(0)
    return cs.stacked() @ s.ravel()


def dual_objective(g, cs: ConstraintSet, dual: DualState) -> float:
    g = as_matrix(g, "g")
    check_compatible(cs, g.shape)
    return nuclear_norm(shifted(g, cs, dual))


def dual_subgradient(g, cs: ConstraintSet, dual: DualState, cfg: SolverConfig) -> np.ndarray:
    """Subgradient of the dual objective, shaped like ``dual.values``.

    At ``H = 0`` this returns zeros (a valid subgradient of the nuclear norm).
    """
    g = as_matrix(g, "g")
    check_compatible(cs, g.shape)
    h = shifted(g, cs, dual)
    if np.linalg.norm(h) < cfg.msign.prenorm_epsilon:
        return np.zeros_like(dual.values)
    return _pair(cs, _sign(h, cfg))


def _primal(h: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    if np.linalg.norm(h) < cfg.msign.prenorm_epsilon:
        return np.zeros_like(h)
    return -cfg.eta * _sign(h, cfg)


def solve_step(
    g,
    cs: ConstraintSet,
    warm: DualState | None,
    cfg: SolverConfig,
    trace: TraceSink | None = None,
    step: int = 0,
) -> StepResult:
    """Run ``cfg.t_in`` dual subgradient steps from ``warm``, then take the Muon-style primal step."""
    g = as_matrix(g, "g")
    check_compatible(cs, g.shape)
    lam = DualState.zeros_for(cs) if warm is None else warm
    if not lam.matches(cs):
        raise DimensionError(f"warm-start dual {lam.values.shape} does not fit a set with k={cs.k}")
    vals = lam.values.copy()
    iters = 0
    if cs.k > 0:
        for m in range(cfg.t_in):
            h = shifted(g, cs, DualState(vals))
            if np.linalg.norm(h) < cfg.msign.prenorm_epsilon:
                grad = np.zeros_like(vals)
            else:
                s = _sign(h, cfg)
                grad = _pair(cs, s)
            if trace is not None:
                trace({
                    "step": step,
                    "inner_iter": m,
                    "dual_objective": nuclear_norm(h),
                    "residual": constraint_residual(_primal(h, cfg), cs),
                })
            iters = m + 1
            if cfg.early_stop_tol > 0 and (grad.size == 0 or np.max(np.abs(grad)) < cfg.early_stop_tol):
                break
            vals = vals - cfg.eta_dual * grad
    lam = DualState(vals)
    h = shifted(g, cs, lam)
    delta = _primal(h, cfg)
    return StepResult(delta=delta, dual=lam, h=h, residual=constraint_residual(delta, cs), inner_iters=iters)


def _smoothed(g: np.ndarray, cs: ConstraintSet, shape, mu: float):
    """``sum_i sqrt(sigma_i(H)^2 + mu^2)`` and its gradient in the flattened multipliers."""

    def fun(x):
        h = shifted(g, cs, DualState(x.reshape(shape)))
        u, s, vh = np.linalg.svd(h, full_matrices=False)
        root = np.sqrt(s * s + mu * mu)
        grad = _pair(cs, (u * (s / root)) @ vh)
        return float(np.sum(root)), grad.ravel()

    return fun


def _smoothed_sign(h: np.ndarray, mu: float) -> np.ndarray:
    u, s, vh = np.linalg.svd(h, full_matrices=False)
    return (u * (s / np.sqrt(s * s + mu * mu))) @ vh


def solve_step_exact(
    g,
    cs: ConstraintSet,
    cfg: SolverConfig,
    tol: float = 1e-4,
    max_iter: int = 2_000,
    trace: TraceSink | None = None,
) -> StepResult:
    """Reference solve of the constrained step, for small problems.

    Phase 1 is subgradient descent on the dual with exact matrix signs and
    diminishing steps ``base / sqrt(m + 1)``; ``base`` starts from
    ``cfg.eta_dual`` and is halved until each step decreases the dual
    objective, so the logged objective is non-increasing. If the recovered
    ``-eta * msign(H)`` meets ``tol`` the step is returned in that form.

    Phase 1 stalls when the dual optimum sits where ``H`` loses rank (the
    nuclear norm is not differentiable there and ``msign(H)`` alone cannot
    satisfy the constraints). Phase 2 then minimizes the smoothed objective
    ``sum sqrt(sigma^2 + mu^2)`` with BFGS for decreasing ``mu``; at its
    stationary point ``S_mu = U diag(sigma / sqrt(sigma^2 + mu^2)) V^T``
    satisfies the constraints, has spectral norm below one, and
    ``-eta * S_mu`` at the smallest ``mu`` meeting ``tol`` is the returned step (snapped to zero when its Frobenius
    norm is below ``tol * eta``, i.e. when only the zero step is feasible).

    LowRank sets are solved in their enumerated ``u_a v_b^T`` form so both
    representations of one constraint set follow the same arithmetic (the
    optimal step is not unique when ``H`` is rank-deficient at the optimum).
    """
    g = as_matrix(g, "g")
    check_compatible(cs, g.shape)
    if isinstance(cs, LowRank):
        out = solve_step_exact(g, lowrank_as_general(cs), cfg, tol=tol, max_iter=max_iter, trace=trace)
        lam = DualState(out.dual.values.reshape(cs.k, cs.k))
        return StepResult(out.delta, lam, out.h, constraint_residual(out.delta, cs), out.inner_iters)
    cfg = replace(cfg, exact_msign=True)
    vals = DualState.zeros_for(cs).values.copy()
    scale = float(np.linalg.norm(g))

    def evaluate(v):
        h = shifted(g, cs, DualState(v))
        return h, nuclear_norm(h)

    h, f = evaluate(vals)
    delta = _primal(h, cfg)
    res = constraint_residual(delta, cs)
    if cs.k == 0 or res <= tol or scale == 0.0:
        return StepResult(delta, DualState(vals), h, res, 0)

    base = cfg.eta_dual * max(1.0, scale)
    it = 0
    # phase 1 hands over once the residual stops shrinking
    best_res, best_at, stall_window = res, 0, 50
    for m in range(max_iter):
        grad = _pair(cs, -delta / cfg.eta)
        gnorm2 = float(np.sum(grad * grad))
        if gnorm2 == 0.0:
            break
        accepted = False
        for _ in range(40):
            step = base / math.sqrt(m + 1)
            cand = vals - step * grad
            h_c, f_c = evaluate(cand)
            if f_c <= f - 1e-4 * step * gnorm2:
                accepted = True
                break
            base *= 0.5
        if not accepted:
            break
        it = m + 1
        vals, h, f = cand, h_c, f_c
        base *= 1.5
        delta = _primal(h, cfg)
        res = constraint_residual(delta, cs)
        if trace is not None:
            trace({"step": 0, "inner_iter": m, "phase": "subgradient", "dual_objective": f, "residual": res})
        if res <= tol:
            return StepResult(delta, DualState(vals), h, res, it)
        if res < 0.9 * best_res:
            best_res, best_at = res, m
        elif m - best_at >= stall_window:
            break

    from scipy.optimize import minimize

    shape = vals.shape
    x = vals.ravel()
    mu = 1e-2 * scale
    best = (res, vals, h, delta)
    last_ok = None
    while mu >= 1e-9 * scale:
        out = minimize(_smoothed(g, cs, shape, mu), x, jac=True, method="BFGS",
                       options={"gtol": 1e-12 * scale, "maxiter": 500})
        x = out.x
        it += int(out.nit)
        v = x.reshape(shape)
        h = shifted(g, cs, DualState(v))
        delta = -cfg.eta * _smoothed_sign(h, mu)
        if np.linalg.norm(delta) <= tol * cfg.eta:
            # the feasible set has collapsed onto the zero step
            delta = np.zeros_like(delta)
        res = constraint_residual(delta, cs)
        if trace is not None:
            trace({"step": 0, "inner_iter": it, "phase": "smoothed", "mu": mu,
                   "dual_objective": nuclear_norm(h), "residual": res})
        # every smoothed stationary point is feasible; smaller mu is closer to optimal
        if res <= tol:
            last_ok = (res, v.copy(), h, delta)
        if res < best[0]:
            best = (res, v.copy(), h, delta)
        mu *= 0.1
    if last_ok is not None:
        res, v, h, delta = last_ok
        return StepResult(delta, DualState(v), h, res, it)
    raise NumericalError(
        f"exact dual solve stalled with residual {best[0]:.3g} > {tol:g}",
        iterations=it,
        best_residual=best[0],
    )
