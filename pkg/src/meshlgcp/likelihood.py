"""Discretized LGCP observation model: log-intensities, Poisson log-likelihood, gradients.

Arrays carry a leading subject axis where it matters: latent fields ``v`` are
``(N, n_px, k)``, counts ``y`` and log-intensities ``W`` are ``(N, n_px, q)`` and the
pixel mask is ``(N, n_px)``. Single-subject inputs without the leading axis also work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .kernel import lower_trapezoid_mask


@dataclass
class ModelParams:
    A: np.ndarray  # (q, k) lower-trapezoidal loadings
    B: np.ndarray  # (p, q) covariate coefficients
    alpha: np.ndarray  # (N, q) per-subject offsets
    phi: np.ndarray  # (k,) decays

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.alpha.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.A.copy(), self.B.copy(), self.alpha.copy(), self.phi.copy())

    def check(self):
        if np.any(self.A[~lower_trapezoid_mask(self.q, self.k)] != 0):
            raise ValueError("loadings violate the lower-trapezoidal zero pattern")
        if self.B.shape[1] != self.q or self.alpha.shape[1] != self.q or self.phi.shape != (self.k,):
            raise ValueError("inconsistent parameter shapes")


@dataclass
class LatentFields:
    v: np.ndarray  # (N, n_px, k)

    @property
    def n_subjects(self) -> int:
        return self.v.shape[0]


def log_intensity(params: ModelParams, v, X=None, subject: int | None = None) -> np.ndarray:
    """``W = 1 alpha^T + X B + v A^T`` for one subject or all subjects at once."""
    v = np.asarray(v, dtype=float)
    alpha = params.alpha if subject is None else params.alpha[subject]
    if subject is None and v.ndim == 3:
        W = alpha[:, None, :] + v @ params.A.T
    else:
        W = alpha + v @ params.A.T
    if X is not None and params.p:
        W = W + np.asarray(X) @ params.B
    return W


def _mask_cells(mask, shape):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    return np.broadcast_to(m[..., None], shape)


def pointwise_loglik(y, W, mask=None) -> np.ndarray:
    """Per-pixel log-likelihood summed over types; masked pixels give 0. Shape ``W.shape[:-1]``."""
    y = np.asarray(y, dtype=float)
    W = np.asarray(W, dtype=float)
    cell = y * W - np.exp(W) - gammaln(y + 1.0)
    m = _mask_cells(mask, cell.shape)
    if m is not None:
        cell = np.where(m, cell, 0.0)
    return cell.sum(axis=-1)


def poisson_loglik(y, W, mask=None) -> float:
    """``sum over observed cells of y W - exp(W) - log y!``."""
    return float(pointwise_loglik(y, W, mask).sum())


def loglik_grad_W(y, W, mask=None) -> np.ndarray:
    """Poisson score ``y - exp(W)`` on observed cells, zero on masked ones."""
    G = np.asarray(y, dtype=float) - np.exp(np.asarray(W, dtype=float))
    m = _mask_cells(mask, G.shape)
    if m is not None:
        G = np.where(m, G, 0.0)
    return G


@dataclass
class Gradients:
    v: np.ndarray
    A: np.ndarray
    B: np.ndarray
    alpha: np.ndarray
    extra: dict = field(default_factory=dict)


def grad_params(G, v, A, X=None) -> Gradients:
    """Chain rule through ``W = 1 alpha^T + X B + v A^T`` given ``G = dloglik/dW``.

    ``G`` and ``v`` carry the subject axis; the returned ``A`` and ``B`` gradients are
    summed over subjects and ``alpha`` is per subject.
    """
    G = np.asarray(G, dtype=float)
    v = np.asarray(v, dtype=float)
    single = G.ndim == 2
    if single:
        G, v = G[None], v[None]
        X = None if X is None else np.asarray(X)[None]
    gv = G @ A
    gA = np.einsum("npj,npr->jr", G, v)
    if X is not None and np.asarray(X).shape[-1] > 0:
        gB = np.einsum("npc,npj->cj", np.asarray(X, dtype=float), G)
    else:
        gB = np.zeros((0, G.shape[-1]))
    galpha = G.sum(axis=1)
    if single:
        gv, galpha = gv[0], galpha[0]
    return Gradients(v=gv, A=gA, B=gB, alpha=galpha)
