"""Exponential correlation and the spatial-factor cross-covariance it induces."""

from __future__ import annotations

import numpy as np

PHI_MIN = 0.1
PHI_MAX = 10.0


class DegenerateLoadingsError(ValueError):
    """A loadings row is identically zero, so that type has no latent variance."""


def exp_corr(h, phi):
    """``exp(-phi * h)``; ``h`` may be an array of non-negative distances."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("distance must be non-negative")
    out = np.exp(-np.multiply(phi, h))
    return float(out) if out.ndim == 0 else out


def lower_trapezoid_mask(q: int, k: int) -> np.ndarray:
    """Boolean mask of the free entries of a ``q x k`` loadings matrix."""
    if not q >= k >= 1:
        raise ValueError(f"need q >= k >= 1, got q={q}, k={k}")
    return np.tril(np.ones((q, k), dtype=bool))


def cross_cov(A, phi, h) -> np.ndarray:
    """Cross-covariance matrix ``sum_j A[:, j] A[:, j]^T exp(-phi_j h)``.

    With an array ``h`` of shape ``(m,)`` the result has shape ``(m, q, q)``.
    """
    A = np.asarray(A, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if A.ndim != 2 or phi.shape != (A.shape[1],):
        raise ValueError(f"shape mismatch: A {A.shape}, phi {phi.shape}")
    h_arr = np.asarray(h, dtype=float)
    rho = exp_corr(h_arr[..., None], phi)
    # (A * rho) @ A^T reduces to exactly A @ A^T where rho == 1
    return (A * rho[..., None, :]) @ A.T


def cross_corr(A, phi, r: int, s: int, h_grid) -> np.ndarray:
    """Correlation between the log-intensities of types ``r`` and ``s`` at distances ``h_grid``."""
    A = np.asarray(A, dtype=float)
    phi = np.asarray(phi, dtype=float)
    crr = A[r] @ A[r]
    css = A[s] @ A[s]
    if crr <= 0 or css <= 0:
        raise DegenerateLoadingsError(f"zero loadings row for type {r if crr <= 0 else s}")
    rho = exp_corr(np.asarray(h_grid, dtype=float)[:, None], phi)
    vals = rho @ (A[r] * A[s]) / np.sqrt(crr * css)
    if r == s:
        vals = np.where(np.asarray(h_grid) == 0, 1.0, vals)
    return np.clip(vals, -1.0, 1.0)


def all_cross_corr(A, phi, h_grid) -> np.ndarray:
    """All pairwise curves at once, shape ``(len(h_grid), q, q)``."""
    A = np.asarray(A, dtype=float)
    C = cross_cov(A, phi, np.asarray(h_grid, dtype=float))
    d = np.einsum("rj,rj->r", A, A)
    if np.any(d <= 0):
        raise DegenerateLoadingsError(f"zero loadings row for type {int(np.argmin(d))}")
    sd = np.sqrt(d)
    return np.clip(C / np.outer(sd, sd), -1.0, 1.0)


def align_signs(A) -> np.ndarray:
    """Flip each column so its first nonzero loading is positive."""
    A = np.array(A, dtype=float, copy=True)
    for j in range(A.shape[1]):
        nz = np.flatnonzero(A[:, j])
        if nz.size and A[nz[0], j] < 0:
            A[:, j] = -A[:, j]
    return A


def pairs(q: int, include_diagonal: bool = True) -> list[tuple[int, int]]:
    return [(r, s) for r in range(q) for s in range(r if include_diagonal else r + 1, q)]
