"""Dense real-matrix helpers: validation, norms, exact SVD and JSON round-trips.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
Everything here is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .errors import DimensionError, NumericalError

# singular values below this fraction of sigma_max count as zero for rank decisions
RANK_RTOL = 1e-12


def as_matrix(a: Any, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array (copying only if needed)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def frob_inner(a, b) -> float:
    """Frobenius inner product tr(a^T b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    return float(np.vdot(a, b))


def frob_norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``r = min(m, n)``.

    ``sigma`` is non-increasing. Note ``v`` holds the right singular vectors
    as columns (not ``vh``).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank_tol(self) -> float:
        return RANK_RTOL * (float(self.sigma[0]) if self.sigma.size else 0.0)

    def numerical_rank(self, rtol: float = RANK_RTOL) -> int:
        if self.sigma.size == 0 or self.sigma[0] <= 0.0:
            return 0
        return int(np.count_nonzero(self.sigma > rtol * self.sigma[0]))

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def svd(a) -> SvdResult:
    """Exact thin SVD via LAPACK."""
    a = as_matrix(a)
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for {a.shape} input: {exc}") from exc
    return SvdResult(u=u, sigma=s, v=vh.T)


def singular_values(a) -> np.ndarray:
    a = as_matrix(a)
    try:
        return np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for {a.shape} input: {exc}") from exc


def spectral_norm(a) -> float:
    """Largest singular value."""
    return float(singular_values(a)[0])


def nuclear_norm(a) -> float:
    """Sum of singular values."""
    return float(np.sum(singular_values(a)))


# -- JSON ------------------------------------------------------------------


def matrix_to_json(a) -> dict:
    a = as_matrix(a)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "entries": a.ravel().tolist()}


def matrix_from_json(obj: Mapping[str, Any]) -> np.ndarray:
    try:
        rows, cols, entries = int(obj["rows"]), int(obj["cols"]), obj["entries"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"matrix JSON needs rows, cols, entries: {exc}") from exc
    if rows < 1 or cols < 1:
        raise DimensionError(f"rows and cols must be positive, got {rows}x{cols}")
    if len(entries) != rows * cols:
        raise DimensionError(f"expected {rows * cols} entries, got {len(entries)}")
    return as_matrix(np.asarray(entries, dtype=np.float64).reshape(rows, cols))
