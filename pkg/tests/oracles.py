"""Brute-force reference computations shared by the unit and acceptance tests.

Nothing here calls into the solver paths it is used to check.
"""
import numpy as np


def nuclear_norms(h):
    """Nuclear norms of a batch (..., m, n): closed form for 2x2, Gram eigenvalues otherwise."""
    if h.shape[-2:] == (2, 2):
        a, b, c, e = h[..., 0, 0], h[..., 0, 1], h[..., 1, 0], h[..., 1, 1]
        return np.maximum(np.hypot(a + e, b - c), np.hypot(a - e, b + c))
    if h.shape[-2] < h.shape[-1]:
        h = np.swapaxes(h, -1, -2)
    gram = np.swapaxes(h, -1, -2) @ h
    return np.sqrt(np.clip(np.linalg.eigvalsh(gram), 0.0, None)).sum(axis=-1)


def _grid_argmin(g, c, lams):
    best_val, best_i = np.inf, None
    for start in range(0, len(lams), 20_000):
        chunk = lams[start:start + 20_000]
        vals = nuclear_norms(g[None] + chunk[:, None, None] * c[None])
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_i = float(vals[i]), start + i
    return best_val, best_i


def dual_grid_min(g, c, lo=-10.0, hi=10.0, step=1e-4, exhaustive=False):
    """min of ||g + lambda c||_* over the lattice lo + i*step in [lo, hi].

    The function is convex in lambda, so the lattice minimizer lies within one
    coarse step of the minimizer over every 100th lattice point; the default
    evaluates the coarse points and then every lattice point in that bracket,
    which gives the same value as ``exhaustive=True`` far faster.
    """
    n = int(round((hi - lo) / step))
    lams = lo + step * np.arange(n + 1)
    if exhaustive:
        val, i = _grid_argmin(g, c, lams)
        return val, float(lams[i])
    stride = 100
    _, ic = _grid_argmin(g, c, lams[::stride])
    a, b = max(0, (ic - 1) * stride - 1), min(n, (ic + 1) * stride + 1)
    val, i = _grid_argmin(g, c, lams[a:b + 1])
    return val, float(lams[a + i])


def spectral_norm_2x2(d):
    """Closed-form largest singular value of a batch of 2x2 matrices (..., 2, 2)."""
    a, b, c, e = d[..., 0, 0], d[..., 0, 1], d[..., 1, 0], d[..., 1, 1]
    return 0.5 * (np.hypot(a + e, b - c) + np.hypot(a - e, b + c))


def primal_grid_min_2x2(g, c, eta, n=25, levels=40):
    """min <g, D> over {||D||_2 <= eta, <c, D> = 0} for 2x2 g, c.

    D = reshape(N x) with N an orthonormal basis of the complement of c, and
    x searched on a 3-D grid that is re-centred on the best feasible point and
    halved in width at every level.
    """
    q, _ = np.linalg.qr(np.column_stack([c.ravel(), np.eye(4)]))
    basis = q[:, 1:4]  # orthonormal, orthogonal to c
    lin = basis.T @ g.ravel()
    center = np.zeros(3)
    width = np.sqrt(2.0) * eta
    axis = np.linspace(-1.0, 1.0, n)
    mesh = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    best_val, best_x = 0.0, np.zeros(3)
    for _ in range(levels):
        pts = center + width * mesh
        d = (pts @ basis.T).reshape(-1, 2, 2)
        ok = spectral_norm_2x2(d) <= eta
        if np.any(ok):
            vals = pts[ok] @ lin
            i = int(np.argmin(vals))
            if vals[i] < best_val:
                best_val, best_x = float(vals[i]), pts[ok][i]
        center = best_x
        width *= 0.5
    return best_val, (basis @ best_x).reshape(2, 2)


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        grad[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return grad
