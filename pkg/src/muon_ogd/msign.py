"""Matrix sign (polar factor) ``U V^T``: exact SVD route and the cubic Newton-Schulz route."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .matlin import as_matrix, spectral_norm, svd


@dataclass(frozen=True)
class MsignConfig:
    """Knobs for both matrix-sign routes.

    ns_steps: number of applications of ``f(X) = 1.5 X - 0.5 X X^T X``.
    prenorm_epsilon: inputs with Frobenius norm below this map to zero.
    zero_threshold: relative cutoff (times sigma_max) for the exact route.
    prenorm: divide by the Frobenius norm before iterating. Turning it off is
        only safe when every singular value is already below sqrt(3).
    """

    ns_steps: int = 5
    prenorm_epsilon: float = 1e-12
    zero_threshold: float = 1e-10
    prenorm: bool = True

    def __post_init__(self):
        if int(self.ns_steps) != self.ns_steps or self.ns_steps < 1:
            raise ValueError(f"ns_steps must be a positive integer, got {self.ns_steps}")
        if not self.prenorm_epsilon > 0 or not self.zero_threshold > 0:
            raise ValueError("prenorm_epsilon and zero_threshold must be positive")


DEFAULT_MSIGN = MsignConfig()


def msign_exact(g, cfg: MsignConfig = DEFAULT_MSIGN) -> np.ndarray:
    """Polar factor from the exact SVD, restricted to numerically nonzero singular values."""
    g = as_matrix(g, "g")
    res = svd(g)
    if res.sigma.size == 0 or res.sigma[0] == 0.0:
        return np.zeros_like(g)
    keep = res.sigma > cfg.zero_threshold * res.sigma[0]
    return res.u[:, keep] @ res.v[:, keep].T


def _ns_iter(x: np.ndarray, steps: int):
    for _ in range(steps):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
        yield x


def ns_trajectory(x, cfg: MsignConfig = DEFAULT_MSIGN) -> list[np.ndarray]:
    """All iterates ``[X_0, X_1, ..., X_steps]`` of the Newton-Schulz map.

    ``X_0`` is the (optionally pre-normalized) input. Tall inputs are iterated
    in transposed form and transposed back, so the returned iterates always
    have the input's shape.
    """
    x = as_matrix(x, "x")
    norm = float(np.linalg.norm(x))
    if norm < cfg.prenorm_epsilon:
        return [np.zeros_like(x)] * (cfg.ns_steps + 1)
    tall = x.shape[0] > x.shape[1]
    y = x.T if tall else x
    if cfg.prenorm:
        y = y / norm
    out = [y]
    out.extend(_ns_iter(y, cfg.ns_steps))
    if tall:
        out = [it.T for it in out]
    return out


def ns5(x, cfg: MsignConfig = DEFAULT_MSIGN) -> np.ndarray:
    """Approximate ``msign(x)`` with ``cfg.ns_steps`` Newton-Schulz steps."""
    x = as_matrix(x, "x")
    norm = float(np.linalg.norm(x))
    if norm < cfg.prenorm_epsilon:
        return np.zeros_like(x)
    tall = x.shape[0] > x.shape[1]
    y = x.T if tall else x
    if cfg.prenorm:
        y = y / norm
    for y in _ns_iter(y, cfg.ns_steps):
        pass
    return y.T if tall else y


def msign_error(g, cfg: MsignConfig = DEFAULT_MSIGN) -> float:
    """Spectral distance between the Newton-Schulz and exact matrix signs."""
    g = as_matrix(g, "g")
    if not np.any(g):
        raise DomainError("msign_error is undefined for the zero matrix")
    return spectral_norm(ns5(g, cfg) - msign_exact(g, cfg))
