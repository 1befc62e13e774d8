"""Metropolis-within-Gibbs sampler for the multi-subject spatial factor LGCP.

One iteration runs, in order:

1. a joint MALA step on ``(B[:, j], free entries of A[j])`` for every cell type ``j``;
2. for every factor ``r``, an adaptive log-scale random-walk Hastings step on ``phi_r``
   with the latent field held fixed, followed by a second one with the whitened
   innovations of the field held fixed (the field moves with ``phi_r``);
3. for every factor ``r``, a joint rescaling of ``A[:, r]`` and ``v[..., r]``, and an
   exact Gibbs draw of a per-subject shift of ``v[..., r]`` offset in ``alpha``; both
   leave the likelihood unchanged;
4. a MALA step on every latent block of every subject (all factors jointly);
5. a MALA step on every subject's intercept vector ``alpha_i``.

Steps 1 and 5 are preconditioned by the Fisher information plus prior precision at
the current point (forward kernel) and at the proposal (reverse kernel). Latent
blocks use a metric built from their conditional prior precision and the expected
Fisher information under the prior, which does not depend on the block, so the
forward and reverse kernels share one Cholesky factor. Blocks share their H/R
factors across subjects, so each block update is vectorized over subjects.

During the first ``n_warmup`` iterations only the latent fields and intercepts move,
so the loadings and decays are not updated against an all-zero field.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .draws import ChainDraws, DrawsStore
from .kernel import PHI_MAX, PHI_MIN, lower_trapezoid_mask
from .likelihood import ModelParams, pointwise_loglik
from .meshedgp import (BlockFactors, MeshGraph, block_logdensity, block_residual, build_mesh,
                       compute_factors, mgp_sample_prior, mgp_whiten)
from .preprocess import CountGrid, GridSpec, ValidationError

logger = logging.getLogger(__name__)

W_CLAMP = 30.0

# RNG stream tags
_ROW, _PHI, _LATENT, _ALPHA, _PHI_NC, _SCALE, _RIDGE, _SHIFT = 1, 2, 3, 4, 5, 6, 7, 8


class NumericalFailure(RuntimeError):
    """The chain reached a state where the target cannot be evaluated."""


@dataclass
class SamplerConfig:
    k: int = 2
    n_iter: int = 4000
    n_burn: int = 2000
    thin: int = 1
    seed: int = 0
    n_chains: int = 1
    tile: tuple[int, int] = (5, 5)
    target_accept_phi: float = 0.44
    target_accept_mala: float = 0.57
    prior_var: float = 1e3
    phi_min: float = PHI_MIN
    phi_max: float = PHI_MAX
    init_phi: float = 1.0
    init_loading: float = 0.5
    phi_noncentered: bool = True
    scale_moves: bool = True
    ridge_moves: bool = True
    shift_moves: bool = True
    warmup_latent: int = -1  # iterations with A, B and phi held at their initial values; -1 = n_burn // 10
    update_loadings: bool = True
    update_phi: bool = True
    update_latent: bool = True
    update_intercepts: bool = True
    store_loglik: bool = True
    threads: int = 1

    def __post_init__(self):
        self.tile = tuple(int(t) for t in self.tile)
        self.validate()

    def validate(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not 0 <= self.n_burn < self.n_iter:
            raise ValidationError("need 0 <= n_burn < n_iter")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValidationError("n_chains must be >= 1")
        if len(self.tile) != 2 or min(self.tile) < 1:
            raise ValidationError("tile must be two integers >= 1")
        if not 0 < self.phi_min < self.phi_max:
            raise ValidationError("need 0 < phi_min < phi_max")
        if not self.phi_min <= self.init_phi <= self.phi_max:
            raise ValidationError("init_phi outside prior support")
        if not self.prior_var > 0:
            raise ValidationError("prior_var must be positive")
        for name in ("target_accept_phi", "target_accept_mala"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must be in (0, 1)")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.warmup_latent > self.n_burn:
            raise ValidationError("warmup_latent cannot exceed n_burn")

    @property
    def n_warmup(self) -> int:
        return self.n_burn // 10 if self.warmup_latent < 0 else self.warmup_latent

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tile"] = list(self.tile)
        return d

    def hash(self) -> str:
        """Hash of every setting that can change the draws (``threads`` excluded)."""
        d = self.to_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelData:
    """Stacked count grids of one fitted group; all images share one GridSpec."""

    y: np.ndarray  # (N, n_px, q)
    mask: np.ndarray  # (N, n_px)
    grid: GridSpec
    X: np.ndarray | None = None  # (N, n_px, p)
    labels: tuple[str, ...] = ()
    image_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.y.ndim != 3 or self.y.shape[1] != self.grid.n_px:
            raise ValidationError("counts must be (N, n_px, q)")
        if self.mask.shape != self.y.shape[:2]:
            raise ValidationError("mask must be (N, n_px)")
        if self.X is not None:
            self.X = np.asarray(self.X, dtype=float)
            if self.X.shape[:2] != self.y.shape[:2]:
                raise ValidationError("covariates must be (N, n_px, p)")
        self.coords = self.grid.unit_coords()
        self.lgamma_y = np.where(self.mask[..., None], gammaln(self.y + 1.0), 0.0)

    @classmethod
    def from_grids(cls, grids: Sequence[CountGrid], X=None) -> "ModelData":
        if not grids:
            raise ValidationError("no count grids")
        g0 = grids[0]
        for g in grids[1:]:
            if g.grid.n_x != g0.grid.n_x or g.grid.n_y != g0.grid.n_y:
                raise ValidationError(
                    f"image {g.image_id}: grid {g.grid.n_x}x{g.grid.n_y} differs from "
                    f"{g0.grid.n_x}x{g0.grid.n_y}; images in one fit must share a GridSpec"
                )
            if not np.allclose(g.grid.unit_coords(), g0.grid.unit_coords(), rtol=0, atol=1e-12):
                raise ValidationError(f"image {g.image_id}: pixel centers differ from image {g0.image_id}")
            if g.labels != g0.labels or g.q != g0.q:
                raise ValidationError(f"image {g.image_id}: cell-type labels differ")
        return cls(
            y=np.stack([g.counts for g in grids]).astype(float),
            mask=np.stack([g.mask for g in grids]),
            grid=g0.grid,
            X=X,
            labels=tuple(g0.labels),
            image_ids=tuple(g.image_id for g in grids),
        )

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def n_px(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.y.shape[2]

    @property
    def p(self) -> int:
        return 0 if self.X is None else self.X.shape[2]


@dataclass
class Adaptation:
    eps_row: np.ndarray  # (q,)
    eps_alpha: np.ndarray  # (N,)
    eps_latent: np.ndarray  # (N, M)
    log_sd_phi: np.ndarray  # (k,)
    log_sd_phi_nc: np.ndarray  # (k,)
    log_sd_scale: np.ndarray  # (k,)
    log_sd_ridge: np.ndarray  # (k,)
    accepted: dict = field(default_factory=dict)
    proposed: dict = field(default_factory=dict)

    def count(self, name: str, acc, n=1):
        self.accepted[name] = self.accepted.get(name, 0) + int(np.sum(acc))
        self.proposed[name] = self.proposed.get(name, 0) + int(n)

    def rates(self) -> dict:
        return {k: self.accepted[k] / self.proposed[k] for k in sorted(self.proposed) if self.proposed[k]}


@dataclass
class ChainState:
    params: ModelParams
    v: np.ndarray  # (N, n_px, k)
    factors: list[BlockFactors]
    adapt: Adaptation
    iteration: int = 0


def conjugate_gaussian_update(Xt, y, V_B, d: float):
    """Posterior of ``y = Xt b + N(0, d^2)`` with prior ``b ~ N(0, V_B)``.

    Returns ``(mu, Sigma)`` with ``Sigma = (V_B^-1 + Xt^T Xt / d^2)^-1`` and
    ``mu = Sigma Xt^T y / d^2``.
    """
    Xt = np.atleast_2d(np.asarray(Xt, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    V_B = np.atleast_2d(np.asarray(V_B, dtype=float))
    if not d > 0:
        raise ValueError("noise sd must be positive")
    try:
        prec = np.linalg.inv(V_B) + Xt.T @ Xt / d**2
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular conjugate system: {exc}") from None
    Linv = np.linalg.inv(L)
    Sigma = Linv.T @ Linv
    mu = Sigma @ (Xt.T @ y) / d**2
    return mu, Sigma


# ---------------------------------------------------------------------------
# generic preconditioned MALA


Target = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class MalaResult:
    x: np.ndarray
    accepted: np.ndarray
    log_ratio: np.ndarray
    accept_prob: np.ndarray
    proposal: np.ndarray
    log_q_fwd: np.ndarray
    log_q_rev: np.ndarray
    lp: np.ndarray
    lp_prop: np.ndarray


def _drift_and_chol(M, g):
    L = np.linalg.cholesky(M)
    drift = np.linalg.solve(M, g[..., None])[..., 0]
    return L, drift


def mala_log_q(x_to, x_from, g_from, M_from, eps):
    """Log density (up to a shared constant) of moving ``x_from -> x_to``."""
    eps = np.asarray(eps, dtype=float)
    L, drift = _drift_and_chol(M_from, g_from)
    d = x_to - x_from - 0.5 * eps[..., None] ** 2 * drift
    quad = np.einsum("...a,...ab,...b->...", d, M_from, d) / eps**2
    dim = x_to.shape[-1]
    return -0.5 * quad + np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1) - dim * np.log(eps)


def mala_step(x: np.ndarray, target: Target, eps: np.ndarray, rng: np.random.Generator) -> MalaResult:
    """One batched preconditioned MALA step.

    ``x`` is ``(b, d)``; ``target`` maps ``(b, d)`` to ``(logpost (b,), grad (b, d),
    metric (b, d, d), invalid (b,))``; ``eps`` is ``(b,)``. Entries with ``eps == 0``
    never move. Invalid proposals (non-finite or clamped log-intensity) are rejected.
    """
    x = np.asarray(x, dtype=float)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), x.shape[:1]).copy()
    z = rng.standard_normal(x.shape)
    logu = np.log(rng.random(x.shape[0]))
    lp, g, M, _ = target(x)
    frozen = eps <= 0
    eps_s = np.where(frozen, 1.0, eps)
    L, drift = _drift_and_chol(M, g)
    noise = np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]
    prop = x + 0.5 * eps_s[:, None] ** 2 * drift + eps_s[:, None] * noise
    prop[frozen] = x[frozen]
    lp_p, g_p, M_p, bad = target(prop)
    dim = x.shape[-1]
    log_q_fwd = -0.5 * np.einsum("...a,...a->...", z, z) + np.log(
        np.diagonal(L, axis1=-2, axis2=-1)).sum(-1) - dim * np.log(eps_s)
    with np.errstate(invalid="ignore", over="ignore"):
        log_q_rev = mala_log_q(x, prop, g_p, M_p, eps_s)
        log_r = lp_p - lp + log_q_rev - log_q_fwd
    ok = np.isfinite(log_r) & ~bad
    log_r = np.where(ok, log_r, -np.inf)
    acc = (logu < log_r) & ~frozen
    aprob = np.where(frozen, 1.0, np.exp(np.minimum(log_r, 0.0)))
    out = np.where(acc[:, None], prop, x)
    return MalaResult(out, acc, log_r, aprob, prop, log_q_fwd, log_q_rev, lp, lp_p)


def mala_step_fixed(x: np.ndarray, target, chol: np.ndarray, eps: np.ndarray,
                    rng: np.random.Generator) -> MalaResult:
    """Batched MALA step with one metric ``chol @ chol.T`` shared by the batch.

    ``target`` maps ``(b, d)`` to ``(logpost (b,), grad (b, d), invalid (b,))``.
    """
    x = np.asarray(x, dtype=float)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), x.shape[:1]).copy()
    z = rng.standard_normal(x.shape)
    logu = np.log(rng.random(x.shape[0]))
    frozen = eps <= 0
    eps_s = np.where(frozen, 1.0, eps)[:, None]
    lp, g, _ = target(x)
    cf = (chol, True)
    drift = linalg.cho_solve(cf, g.T, check_finite=False).T
    noise = linalg.solve_triangular(chol, z.T, lower=True, trans="T", check_finite=False).T
    prop = x + 0.5 * eps_s**2 * drift + eps_s * noise
    prop[frozen] = x[frozen]
    lp_p, g_p, bad = target(prop)
    drift_p = linalg.cho_solve(cf, g_p.T, check_finite=False).T
    dev = (x - prop - 0.5 * eps_s**2 * drift_p) @ chol
    log_q_fwd = -0.5 * np.einsum("na,na->n", z, z)
    log_q_rev = -0.5 * np.einsum("na,na->n", dev, dev) / eps_s[:, 0] ** 2
    with np.errstate(invalid="ignore", over="ignore"):
        log_r = lp_p - lp + log_q_rev - log_q_fwd
    ok = np.isfinite(log_r) & ~bad
    log_r = np.where(ok, log_r, -np.inf)
    acc = (logu < log_r) & ~frozen
    aprob = np.where(frozen, 1.0, np.exp(np.minimum(log_r, 0.0)))
    out = np.where(acc[:, None], prop, x)
    return MalaResult(out, acc, log_r, aprob, prop, log_q_fwd, log_q_rev, lp, lp_p)


def _adapt_rate(t: int) -> float:
    return (t + 1.0) ** -0.6


# ---------------------------------------------------------------------------
# targets


def row_target(F, Z, y, offset, mask, prior_var, family: str = "poisson", noise_sd: float = 1.0):
    """Full conditional of ``F_j = (B[:, j], free A[j])`` given latent fields.

    ``Z`` stacks ``[X_i, v_i[:, :m]]`` over subjects as ``(N, n_px, m)``; ``y``,
    ``offset`` and ``mask`` are ``(N, n_px)``. ``F`` is batched ``(b, m)``. The
    Gaussian family (known ``noise_sd``) is a check against the conjugate formula.
    """
    eta = offset[None] + np.einsum("npm,bm->bnp", Z, F)
    if family == "poisson":
        bad = np.any(np.where(mask[None], eta, -np.inf) > W_CLAMP, axis=(1, 2))
        lam = np.exp(np.minimum(eta, W_CLAMP))
        ll = np.where(mask[None], y[None] * eta - lam, 0.0).sum(axis=(1, 2))
        resid = np.where(mask[None], y[None] - lam, 0.0)
        wts = np.where(mask[None], lam, 0.0)
    elif family == "gaussian":
        bad = np.zeros(F.shape[0], dtype=bool)
        r = np.where(mask[None], y[None] - eta, 0.0)
        ll = -0.5 * (r**2).sum(axis=(1, 2)) / noise_sd**2
        resid = r / noise_sd**2
        wts = np.broadcast_to(mask[None] / noise_sd**2, eta.shape)
    else:
        raise ValueError(f"unknown family {family!r}")
    lp = ll - 0.5 * (F**2).sum(-1) / prior_var
    g = np.einsum("npm,bnp->bm", Z, resid) - F / prior_var
    M = np.einsum("npm,bnp,npl->bml", Z, wts, Z) + np.eye(F.shape[-1]) / prior_var
    return lp, g, M, bad


# ---------------------------------------------------------------------------
# the sampler


class Sampler:
    def __init__(self, data: ModelData, config: SamplerConfig, chain: int = 0):
        self.data = data
        self.cfg = config
        self.chain = chain
        q, k = data.q, config.k
        if k > q:
            raise ValidationError(f"k={k} exceeds the number of cell types q={q}")
        self.free = lower_trapezoid_mask(q, k)
        self.mesh: MeshGraph = build_mesh(data.grid, config.tile)
        self.M = self.mesh.n_blocks
        self._pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
        self.state = self._initial_state()

    # -- setup ---------------------------------------------------------------

    def _initial_state(self) -> ChainState:
        d, cfg = self.data, self.cfg
        q, k, N = d.q, cfg.k, d.N
        A = np.zeros((q, k))
        A[np.arange(k), np.arange(k)] = cfg.init_loading
        n_obs = d.mask.sum(axis=1)
        tot = np.where(d.mask[..., None], d.y, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = tot / n_obs[:, None]
        alpha = np.where(n_obs[:, None] > 0, np.log(mean + 1.0 / d.n_px), 0.0)
        params = ModelParams(A=A, B=np.zeros((d.p, q)), alpha=alpha, phi=np.full(k, cfg.init_phi))
        factors = [compute_factors(self.mesh, d.coords, cfg.init_phi) for _ in range(k)]
        adapt = Adaptation(
            eps_row=np.full(q, 0.5),
            eps_alpha=np.full(N, 0.5),
            eps_latent=np.full((N, self.M), 0.5),
            log_sd_phi=np.full(k, math.log(0.1)),
            log_sd_phi_nc=np.full(k, math.log(0.1)),
            log_sd_scale=np.full(k, math.log(0.02)),
            log_sd_ridge=np.full(k, math.log(0.1)),
        )
        state = ChainState(params, np.zeros((N, d.n_px, k)), factors, adapt)
        self._prior_prec = [self._block_prior_precision(s, factors) for s in range(self.M)]
        self._log_count_cap = math.log(float(self.data.y.max()) + 1.0) + 1.0
        return state

    def _block_prior_precision(self, s: int, factors: list[BlockFactors], only: int | None = None,
                               out: np.ndarray | None = None) -> np.ndarray:
        """Conditional prior precision of block ``s`` given its Markov blanket, layout ``pixel*k + r``."""
        k = self.cfg.k
        n = self.mesh.blocks[s].size
        Q = np.zeros((n * k, n * k)) if out is None else out
        for r in range(k) if only is None else [only]:
            f = factors[r]
            Qr = f.R_inv[s].copy()
            for c, sl in self.mesh.child_slices[s]:
                Hc = f.H[c][:, sl]
                Qr += Hc.T @ f.R_inv[c] @ Hc
            Q[r::k, r::k] = Qr
        return Q

    def rng(self, tag: int, index: int = 0) -> np.random.Generator:
        """Counter-based stream keyed by (seed, chain, iteration, update kind, index)."""
        ss = np.random.SeedSequence([self.cfg.seed, self.chain, self.state.iteration, tag, index])
        return np.random.Generator(np.random.PCG64(ss))

    # -- helpers -------------------------------------------------------------

    def _W(self, params: ModelParams, v: np.ndarray) -> np.ndarray:
        W = params.alpha[:, None, :] + v @ params.A.T
        if self.data.p:
            W = W + self.data.X @ params.B
        return W

    def _adapting(self) -> bool:
        return self.state.iteration < self.cfg.n_burn

    # -- step 1: loadings rows and coefficients ------------------------------

    def update_loadings_row(self, j: int):
        st, d, cfg = self.state, self.data, self.cfg
        m = int(self.free[j].sum())
        Z = st.v[:, :, :m]
        if d.p:
            Z = np.concatenate([d.X, Z], axis=2)
        offset = st.params.alpha[:, j][:, None] * np.ones((1, d.n_px))
        F0 = np.concatenate([st.params.B[:, j], st.params.A[j, :m]])

        def target(F):
            return row_target(F, Z, d.y[:, :, j], offset, d.mask, cfg.prior_var)

        res = mala_step(F0[None], target, st.adapt.eps_row[j:j + 1], self.rng(_ROW, j))
        F = res.x[0]
        st.params.B[:, j] = F[:d.p]
        st.params.A[j, :m] = F[d.p:]
        st.adapt.count("loadings", res.accepted)
        if self._adapting():
            st.adapt.eps_row[j] *= math.exp(_adapt_rate(st.iteration) * (res.accept_prob[0] - cfg.target_accept_mala))
        return res

    # -- step 3: decays -------------------------------------------------------

    def _field_logdensity(self, r: int, f: BlockFactors) -> float:
        vr = self.state.v[:, :, r]
        return float(sum(block_logdensity(vr, f, self.mesh, s).sum() for s in range(self.M)))

    def _set_factor(self, r: int, phi: float, f: BlockFactors):
        st = self.state
        st.params.phi[r] = phi
        st.factors[r] = f
        for s in range(self.M):
            self._block_prior_precision(s, st.factors, only=r, out=self._prior_prec[s])

    def update_phi(self, r: int, phi_prop: float | None = None):
        """Centered Hastings step: the target is the MGP density of factor ``r`` summed over subjects."""
        st, cfg = self.state, self.cfg
        rng = self.rng(_PHI, r)
        phi = st.params.phi[r]
        z, logu = rng.standard_normal(), math.log(rng.random())
        if phi_prop is None:
            phi_prop = phi * math.exp(math.exp(st.adapt.log_sd_phi[r]) * z)
        if not cfg.phi_min <= phi_prop <= cfg.phi_max:
            log_r = -math.inf
            f_new = None
        elif phi_prop == phi:
            log_r = 0.0
            f_new = st.factors[r]
        else:
            f_new = compute_factors(self.mesh, self.data.coords, phi_prop)
            # log-scale random walk: Jacobian phi'/phi
            log_r = (self._field_logdensity(r, f_new) - self._field_logdensity(r, st.factors[r])
                     + math.log(phi_prop) - math.log(phi))
        acc = logu < log_r
        if acc and f_new is not st.factors[r]:
            self._set_factor(r, phi_prop, f_new)
        st.adapt.count("phi", acc)
        if self._adapting():
            st.adapt.log_sd_phi[r] += _adapt_rate(st.iteration) * (
                min(1.0, math.exp(min(log_r, 0.0))) - cfg.target_accept_phi)
        return acc, log_r

    def update_phi_noncentered(self, r: int, ridge: bool = False):
        """Hastings step on ``phi_r`` holding the whitened innovations of factor ``r`` fixed.

        Leaves the same posterior invariant as :meth:`update_phi` but moves ``phi``
        and the field together, which mixes far better when counts are sparse. With
        ``ridge=True`` the loadings column is rescaled by ``(phi / phi')^(1/2)`` as well,
        so the move follows the direction along which ``|A[:, r]|^2 * phi_r`` (the
        quantity the data pin down for an exponential kernel) stays constant.
        """
        st, cfg, d = self.state, self.cfg, self.data
        rng = self.rng(_RIDGE if ridge else _PHI_NC, r)
        log_sd = st.adapt.log_sd_ridge if ridge else st.adapt.log_sd_phi_nc
        phi = st.params.phi[r]
        z, logu = rng.standard_normal(), math.log(rng.random())
        delta = math.exp(log_sd[r]) * z
        phi_prop = phi * math.exp(delta)
        log_r = -math.inf
        if cfg.phi_min <= phi_prop <= cfg.phi_max:
            f_new = compute_factors(self.mesh, d.coords, phi_prop)
            innov = mgp_whiten(st.v[:, :, r], st.factors[r], self.mesh)
            vr_new = mgp_sample_prior(f_new, self.mesh, z=innov)
            a_old = st.params.A[:, r]
            c = math.exp(-0.5 * delta) if ridge else 1.0
            a_new = a_old * c
            W_old = self._W(st.params, st.v)
            dW = vr_new[..., None] * a_new - st.v[:, :, r][..., None] * a_old
            W_new = W_old + dW
            if np.all(np.where(d.mask[..., None], W_new, -np.inf) <= W_CLAMP):
                ll_new = np.where(d.mask[..., None], d.y * W_new - np.exp(W_new), 0.0).sum()
                ll_old = np.where(d.mask[..., None], d.y * W_old - np.exp(W_old), 0.0).sum()
                log_r = ll_new - ll_old + delta
                if ridge:
                    m_r = int(self.free[:, r].sum())
                    log_r += (-0.5 * float(a_old @ a_old) * (c * c - 1.0) / cfg.prior_var
                              - 0.5 * delta * m_r)
        acc = logu < log_r
        if acc:
            st.v[:, :, r] = vr_new
            if ridge:
                st.params.A[:, r] = a_new
            self._set_factor(r, phi_prop, f_new)
        st.adapt.count("phi_ridge" if ridge else "phi_nc", acc)
        if self._adapting():
            log_sd[r] += _adapt_rate(st.iteration) * (
                min(1.0, math.exp(min(log_r, 0.0))) - cfg.target_accept_phi)
        return acc

    # -- scale interweaving ----------------------------------------------------

    def _field_quad(self, r: int) -> float:
        vr = self.state.v[:, :, r]
        f = self.state.factors[r]
        tot = 0.0
        for s in range(self.M):
            e = block_residual(vr, f, self.mesh, s)
            tot += float(np.einsum("na,ab,nb->", e, f.R_inv[s], e))
        return tot

    def update_scale(self, r: int):
        """Rescale ``A[:, r] -> c A[:, r]`` and ``v[..., r] -> v[..., r] / c`` jointly.

        The likelihood is invariant, so the Hastings ratio involves only the priors
        and the Jacobian of the multiplicative group action.
        """
        st, cfg, d = self.state, self.cfg, self.data
        rng = self.rng(_SCALE, r)
        z, logu = rng.standard_normal(), math.log(rng.random())
        log_c = math.exp(st.adapt.log_sd_scale[r]) * z
        quad = self._field_quad(r)
        a2 = float(st.params.A[:, r] @ st.params.A[:, r])
        m_r = int(self.free[:, r].sum())
        n_v = d.N * d.n_px
        c2 = math.exp(2 * log_c)
        log_r = (-0.5 * quad * (1.0 / c2 - 1.0) - 0.5 * a2 * (c2 - 1.0) / cfg.prior_var
                 + (m_r - n_v) * log_c)
        acc = logu < log_r
        if acc:
            c = math.exp(log_c)
            st.params.A[:, r] *= c
            st.v[:, :, r] /= c
        st.adapt.count("scale", acc)
        if self._adapting():
            st.adapt.log_sd_scale[r] += _adapt_rate(st.iteration) * (
                min(1.0, math.exp(min(log_r, 0.0))) - cfg.target_accept_phi)
        return acc

    def update_shift(self, r: int):
        """Exact Gibbs draw along ``v_i[:, r] + c_i``, ``alpha_i - c_i A[:, r]`` for every subject.

        The likelihood is constant along this direction (a translation, so no Jacobian)
        and the MGP and intercept priors are quadratic in ``c_i``, so ``c_i`` is Gaussian.
        It moves the part of a long-range factor that is confounded with the intercepts.
        """
        st, cfg, d = self.state, self.cfg, self.data
        f = st.factors[r]
        vr = st.v[:, :, r]
        ones = np.ones(d.n_px)
        prec, lin = 0.0, np.zeros(d.N)
        for s in range(self.M):
            u = block_residual(ones, f, self.mesh, s)
            Ru = f.R_inv[s] @ u
            prec += float(u @ Ru)
            lin -= block_residual(vr, f, self.mesh, s) @ Ru
        a = st.params.A[:, r]
        prec += float(a @ a) / cfg.prior_var
        lin += st.params.alpha @ a / cfg.prior_var
        c = lin / prec + self.rng(_SHIFT, r).standard_normal(d.N) / math.sqrt(prec)
        st.v[:, :, r] += c[:, None]
        st.params.alpha -= c[:, None] * a[None, :]
        return c

    # -- step 4: latent blocks ------------------------------------------------

    def _latent_metric_weights(self) -> np.ndarray:
        """Prior-expected intensity per type, averaged over subjects (free of the latent field)."""
        p = self.state.params
        cap = self._log_count_cap
        return np.exp(np.minimum(p.alpha + 0.5 * (p.A**2).sum(axis=1), cap)).mean(axis=0)

    def latent_block_target(self, s: int, lam_bar: np.ndarray | None = None):
        """Log full conditional of block ``s`` for every subject, and the proposal metric.

        The conditional prior of the block given its Markov blanket is the quadratic
        form ``-x^T Q x / 2 + b^T x`` (own conditional plus children's conditionals).
        Returns ``(target, chol)`` where ``chol`` is the Cholesky factor of
        ``Q + expected Fisher information``; the metric never depends on the block itself.
        """
        st, d, mesh, k = self.state, self.data, self.mesh, self.cfg.k
        b = mesh.blocks[s]
        pp = mesh.parent_pixels[s]
        n = b.size
        v = st.v
        A = st.params.A
        lin = np.zeros((d.N, n, k))
        for r, f in enumerate(st.factors):
            if pp.size:
                lin[:, :, r] = (v[:, pp, r] @ f.H[s].T) @ f.R_inv[s]
            for c, sl in mesh.child_slices[s]:
                Hc = f.H[c]
                Hcs = Hc[:, sl]
                cb = v[:, mesh.blocks[c], r] - v[:, mesh.parent_pixels[c], r] @ Hc.T + v[:, b, r] @ Hcs.T
                lin[:, :, r] += (cb @ f.R_inv[c]) @ Hcs
        lin = lin.reshape(d.N, n * k)
        Q = self._prior_prec[s]
        base_W = st.params.alpha[:, None, :]
        if d.p:
            base_W = base_W + d.X[:, b] @ st.params.B
        y_s = d.y[:, b]
        m_s = d.mask[:, b][..., None]

        def target(xflat):
            x = xflat.reshape(-1, n, k)
            Qx = xflat @ Q
            lp = -0.5 * np.einsum("na,na->n", xflat, Qx) + np.einsum("na,na->n", lin, xflat)
            W = base_W + x @ A.T
            bad = np.any(np.where(m_s, W, -np.inf) > W_CLAMP, axis=(1, 2))
            lam = np.exp(np.minimum(W, W_CLAMP))
            lp = lp + np.where(m_s, y_s * W - lam, 0.0).sum(axis=(1, 2))
            g = lin - Qx + (np.where(m_s, y_s - lam, 0.0) @ A).reshape(xflat.shape)
            return lp, g, bad

        if lam_bar is None:
            lam_bar = self._latent_metric_weights()
        obs = d.mask[:, b].mean(axis=0)
        fisher = (A.T * lam_bar) @ A
        Mt = Q.copy().reshape(n, k, n, k)
        idx = np.arange(n)
        Mt[idx, :, idx, :] += obs[:, None, None] * fisher
        chol = np.linalg.cholesky(Mt.reshape(n * k, n * k))
        return target, chol

    def update_latent_block(self, s: int, lam_bar: np.ndarray | None = None) -> MalaResult:
        st, cfg = self.state, self.cfg
        b = self.mesh.blocks[s]
        target, chol = self.latent_block_target(s, lam_bar)
        x0 = st.v[:, b, :].reshape(self.data.N, -1)
        res = mala_step_fixed(x0, target, chol, st.adapt.eps_latent[:, s], self.rng(_LATENT, s))
        st.v[:, b, :] = res.x.reshape(self.data.N, b.size, cfg.k)
        if self._adapting():
            st.adapt.eps_latent[:, s] *= np.exp(_adapt_rate(st.iteration) * (res.accept_prob - cfg.target_accept_mala))
        return res

    def update_latent(self):
        acc = 0
        lam_bar = self._latent_metric_weights()
        for group in self.mesh.color_groups():
            if self._pool is None:
                results = [self.update_latent_block(s, lam_bar) for s in group]
            else:
                results = list(self._pool.map(lambda s: self.update_latent_block(s, lam_bar), group))
            acc += sum(int(r.accepted.sum()) for r in results)
        self.state.adapt.count("latent", acc, self.data.N * self.M)

    # -- intercepts ------------------------------------------------------------

    def intercept_target(self):
        st, d, cfg = self.state, self.data, self.cfg
        rest = st.v @ st.params.A.T
        if d.p:
            rest = rest + d.X @ st.params.B
        m = d.mask[..., None]

        def target(a):
            W = a[:, None, :] + rest
            bad = np.any(np.where(m, W, -np.inf) > W_CLAMP, axis=(1, 2))
            lam = np.exp(np.minimum(W, W_CLAMP))
            ll = np.where(m, d.y * W - lam, 0.0).sum(axis=(1, 2))
            lp = ll - 0.5 * (a**2).sum(-1) / cfg.prior_var
            g = np.where(m, d.y - lam, 0.0).sum(axis=1) - a / cfg.prior_var
            info = np.where(m, lam, 0.0).sum(axis=1) + 1.0 / cfg.prior_var
            M = info[:, :, None] * np.eye(d.q)
            return lp, g, M, bad

        return target

    def update_intercepts(self) -> MalaResult:
        st, cfg = self.state, self.cfg
        res = mala_step(st.params.alpha, self.intercept_target(), st.adapt.eps_alpha, self.rng(_ALPHA))
        st.params.alpha[:] = res.x
        st.adapt.count("alpha", res.accepted, self.data.N)
        if self._adapting():
            st.adapt.eps_alpha *= np.exp(_adapt_rate(st.iteration) * (res.accept_prob - cfg.target_accept_mala))
        return res

    # -- driver ------------------------------------------------------------------

    def step(self):
        cfg = self.cfg
        warm = self.state.iteration < cfg.n_warmup
        if cfg.update_loadings and not warm:
            for j in range(self.data.q):
                self.update_loadings_row(j)
        if cfg.update_phi and not warm:
            for r in range(cfg.k):
                self.update_phi(r)
                if cfg.phi_noncentered and cfg.update_latent:
                    self.update_phi_noncentered(r)
                if cfg.ridge_moves and cfg.update_latent and cfg.update_loadings:
                    self.update_phi_noncentered(r, ridge=True)
        if cfg.scale_moves and cfg.update_loadings and cfg.update_latent and not warm:
            for r in range(cfg.k):
                self.update_scale(r)
        if cfg.shift_moves and cfg.update_latent and cfg.update_intercepts and not warm:
            for r in range(cfg.k):
                self.update_shift(r)
        if cfg.update_latent:
            self.update_latent()
        if cfg.update_intercepts:
            self.update_intercepts()
        self.state.iteration += 1

    def pointwise_loglik(self) -> np.ndarray:
        st, d = self.state, self.data
        return pointwise_loglik(d.y, self._W(st.params, st.v), d.mask)

    def run(self, progress: Callable[[int], None] | None = None) -> ChainDraws:
        cfg, d = self.cfg, self.data
        keep = [t for t in range(cfg.n_burn, cfg.n_iter) if (t - cfg.n_burn) % cfg.thin == 0]
        S = len(keep)
        out = ChainDraws(
            A=np.zeros((S, d.q, cfg.k)),
            B=np.zeros((S, d.p, d.q)),
            alpha=np.zeros((S, d.N, d.q)),
            phi=np.zeros((S, cfg.k)),
            iterations=np.array(keep, dtype=np.int64),
            loglik=np.zeros((S, d.N * d.n_px)) if cfg.store_loglik else None,
        )
        v_mean = np.zeros_like(self.state.v)
        i = 0
        try:
            for t in range(cfg.n_iter):
                self.step()
                if i < S and t == keep[i]:
                    p = self.state.params
                    out.A[i], out.B[i], out.alpha[i], out.phi[i] = p.A, p.B, p.alpha, p.phi
                    if cfg.store_loglik:
                        out.loglik[i] = self.pointwise_loglik().ravel()
                    v_mean += self.state.v
                    i += 1
                if not np.all(np.isfinite(self.state.v)):
                    raise NumericalFailure(f"non-finite latent field at iteration {t}")
                if progress is not None:
                    progress(t)
        finally:
            if self._pool is not None:
                self._pool.shutdown()
        out.v_mean = v_mean / max(S, 1)
        out.accept_rates = self.state.adapt.rates()
        return out


def _run_one(args):
    data, cfg, chain = args
    return Sampler(data, cfg, chain).run()


def run_chain(data: ModelData | Sequence[CountGrid], config: SamplerConfig,
              progress: Callable[[int], None] | None = None) -> DrawsStore:
    """Run ``config.n_chains`` independent chains and collect their post-burn-in draws.

    Results depend only on ``(data, config)``; ``config.threads`` changes wall time only.
    """
    if not isinstance(data, ModelData):
        data = ModelData.from_grids(data)
    config.validate()
    if config.k > data.q:
        raise ValidationError(f"k={config.k} exceeds the number of cell types q={data.q}")
    if config.n_chains > 1 and config.threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        one = SamplerConfig(**{**config.to_dict(), "threads": 1})
        with ProcessPoolExecutor(min(config.threads, config.n_chains)) as ex:
            chains = list(ex.map(_run_one, [(data, one, c) for c in range(config.n_chains)]))
    else:
        chains = [Sampler(data, config, c).run(progress) for c in range(config.n_chains)]
    meta = {
        "seed": config.seed,
        "config_hash": config.hash(),
        "config": {k: v for k, v in config.to_dict().items() if k != "threads"},
        "labels": list(data.labels),
        "image_ids": list(data.image_ids),
        "grid": data.grid.to_dict(),
        "n_subjects": data.N,
        "n_px": data.n_px,
        "k": config.k,
        "p": data.p,
    }
    return DrawsStore(chains=chains, meta=meta)
