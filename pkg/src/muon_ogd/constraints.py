"""Protected-direction sets, the Euclidean (Frobenius) OGD projection step, and
extraction of low-rank protected subspaces from weights."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, Union

import numpy as np

from .errors import DimensionError, DomainError
from .matlin import as_matrix, frob_inner, matrix_from_json, matrix_to_json, svd

ORTHO_TOL = 1e-8
GRAM_RCOND = 1e-10
_TINY = 1e-300


@dataclass(frozen=True)
class General:
    """Arbitrary constraint matrices ``C_1..C_k``; an update must satisfy <C_i, delta> = 0."""

    c: tuple = ()

    def __post_init__(self):
        mats = tuple(as_matrix(ci, f"c[{i}]") for i, ci in enumerate(self.c))
        if mats and any(m.shape != mats[0].shape for m in mats):
            raise DimensionError("all constraint matrices must share one shape")
        for m in mats:
            m.setflags(write=False)
        object.__setattr__(self, "c", mats)

    @property
    def k(self) -> int:
        return len(self.c)

    @property
    def shape(self) -> tuple[int, int] | None:
        return self.c[0].shape if self.c else None

    def stacked(self) -> np.ndarray:
        """Constraints flattened into the rows of a ``k x (m*n)`` matrix."""
        return np.stack([ci.ravel() for ci in self.c])


@dataclass(frozen=True)
class LowRank:
    """Bilinear constraints ``u^T delta v = 0`` with orthonormal ``u`` (m x k) and ``v`` (n x k)."""

    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)

    def __post_init__(self):
        u = as_matrix(self.u, "u")
        v = as_matrix(self.v, "v")
        if u.shape[1] != v.shape[1]:
            raise DimensionError(f"u and v need the same column count, got {u.shape} and {v.shape}")
        k = u.shape[1]
        for name, q in (("u", u), ("v", v)):
            err = np.max(np.abs(q.T @ q - np.eye(k)))
            if err > ORTHO_TOL:
                raise DomainError(f"{name} columns are not orthonormal (max |{name}^T {name} - I| = {err:.3g})")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def k(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.u.shape[0], self.v.shape[0])


ConstraintSet = Union[General, LowRank]

EMPTY = General()


@dataclass(frozen=True)
class ProtectedRankPolicy:
    fraction: float = 0.08
    max_rank: int = 48

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.max_rank < 1:
            raise ValueError(f"max_rank must be positive, got {self.max_rank}")

    def rank_for(self, shape: tuple[int, int]) -> int:
        r = min(shape)
        return max(1, min(math.ceil(self.fraction * r), self.max_rank, r))


def num_constraints(cs: ConstraintSet) -> int:
    """Scalar constraint count: k for General, k^2 for LowRank."""
    return cs.k if isinstance(cs, General) else cs.k * cs.k


def is_empty(cs: ConstraintSet) -> bool:
    return cs.k == 0


def check_compatible(cs: ConstraintSet, shape: tuple[int, int]) -> None:
    if cs.k == 0:
        return
    if tuple(cs.shape) != tuple(shape):
        raise DimensionError(f"constraints act on {cs.shape} matrices, parameter is {tuple(shape)}")


def lowrank_as_general(cs: LowRank) -> General:
    """Enumerate the k^2 rank-one directions ``u_a v_b^T`` in row-major (a, b) order."""
    k = cs.k
    return General(tuple(np.outer(cs.u[:, a], cs.v[:, b]) for a in range(k) for b in range(k)))


def project(g, cs: ConstraintSet) -> np.ndarray:
    """Orthogonal (Frobenius) projection of ``g`` onto span{C_i}."""
    g = as_matrix(g, "g")
    check_compatible(cs, g.shape)
    if cs.k == 0:
        return np.zeros_like(g)
    if isinstance(cs, LowRank):
        return cs.u @ (cs.u.T @ g @ cs.v) @ cs.v.T
    a = cs.stacked()
    gram = a @ a.T
    coef = np.linalg.pinv(gram, rcond=GRAM_RCOND, hermitian=True) @ (a @ g.ravel())
    return (a.T @ coef).reshape(g.shape)


def frobenius_ogd_step(g, cs: ConstraintSet, inv_l: float) -> np.ndarray:
    """Closed-form Euclidean OGD update ``-inv_l * (g - Proj_span{C}(g))``."""
    if not inv_l > 0:
        raise ValueError(f"inv_l must be positive, got {inv_l}")
    g = as_matrix(g, "g")
    return -inv_l * (g - project(g, cs))


def extract_lowrank_constraints(w, policy: ProtectedRankPolicy | None = None, rank: int | None = None) -> LowRank:
    """Top-k singular subspaces of ``w`` as a :class:`LowRank` set.

    ``rank`` overrides the policy. Each ``u`` column is sign-fixed so its
    largest-magnitude entry is positive (``v`` flips with it).
    """
    w = as_matrix(w, "w")
    if rank is None:
        rank = (policy or ProtectedRankPolicy()).rank_for(w.shape)
    if not 1 <= rank <= min(w.shape):
        raise DomainError(f"rank must lie in [1, {min(w.shape)}], got {rank}")
    res = svd(w)
    if res.sigma[0] == 0.0:
        raise DomainError("cannot extract a protected subspace from the zero matrix")
    u = res.u[:, :rank].copy()
    v = res.v[:, :rank].copy()
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(rank)])
    signs[signs == 0] = 1.0
    return LowRank(u * signs, v * signs)


def constraint_residual(delta, cs: ConstraintSet) -> float:
    """Normalized constraint violation of ``delta`` (0 means fully feasible)."""
    delta = as_matrix(delta, "delta")
    if cs.k == 0:
        return 0.0
    check_compatible(cs, delta.shape)
    dn = float(np.linalg.norm(delta))
    if dn == 0.0:
        return 0.0
    if isinstance(cs, LowRank):
        return float(np.linalg.norm(cs.u.T @ delta @ cs.v)) / max(dn, _TINY)
    return max(abs(frob_inner(ci, delta)) / max(float(np.linalg.norm(ci)) * dn, _TINY) for ci in cs.c)


# -- JSON ------------------------------------------------------------------


def constraints_to_json(cs: ConstraintSet) -> dict:
    if isinstance(cs, LowRank):
        return {"variant": "lowrank", "u": matrix_to_json(cs.u), "v": matrix_to_json(cs.v)}
    return {"variant": "general", "c": [matrix_to_json(ci) for ci in cs.c]}


def constraints_from_json(obj: Mapping[str, Any]) -> ConstraintSet:
    variant = obj.get("variant")
    if variant == "lowrank":
        return LowRank(matrix_from_json(obj["u"]), matrix_from_json(obj["v"]))
    if variant == "general":
        mats: Sequence = obj.get("c", [])
        return General(tuple(matrix_from_json(m) for m in mats))
    raise ValueError(f"unknown constraint variant {variant!r}")
