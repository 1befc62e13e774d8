"""Ground-truth data generator (dense-GP simulation) and grid coarsening."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .kernel import all_cross_corr, lower_trapezoid_mask
from .preprocess import CountGrid, GridSpec, ValidationError

MAX_SIM_PIXELS = 48 * 48


@dataclass
class SimConfig:
    q: int = 4
    k: int = 2
    N: int = 20
    n_x: int = 16
    n_y: int = 16
    phi_min: float = 1.0
    phi_max: float = 3.0
    alpha: float = -2.0
    extent: tuple[float, float] = (1.0, 0.75)
    l_star: float = 3000.0
    diag_range: tuple[float, float] = (0.5, 1.0)
    offdiag_range: tuple[float, float] = (-0.7, 0.7)
    seed: int = 0
    n_curve: int = 60

    def __post_init__(self):
        self.extent = tuple(float(e) for e in self.extent)
        self.diag_range = tuple(self.diag_range)
        self.offdiag_range = tuple(self.offdiag_range)
        if not 1 <= self.k <= self.q:
            raise ValidationError("need 1 <= k <= q")
        if not 0 < self.phi_min <= self.phi_max:
            raise ValidationError("need 0 < phi_min <= phi_max")
        if self.N < 1 or self.n_x < 1 or self.n_y < 1:
            raise ValidationError("N, n_x, n_y must be >= 1")
        if self.n_x * self.n_y > MAX_SIM_PIXELS:
            raise ValidationError(f"dense simulation limited to {MAX_SIM_PIXELS} pixels")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.n_x, self.n_y, self.l_star, *self.extent)


@dataclass
class TruthRecord:
    A: np.ndarray
    phi: np.ndarray
    alpha: float
    V: np.ndarray  # (N, n_px, k)
    W: np.ndarray  # (N, n_px, q)
    h_unit: np.ndarray
    curves: np.ndarray  # (len(h), q, q)
    l_star: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def h_microns(self) -> np.ndarray:
        return self.h_unit * self.l_star

    def to_json(self) -> dict:
        q = self.A.shape[0]
        return {
            "A": self.A.tolist(),
            "phi": self.phi.tolist(),
            "alpha": self.alpha,
            "l_star": self.l_star,
            "h_unit": self.h_unit.tolist(),
            "h_microns": self.h_microns.tolist(),
            "curves": [
                {"pair_r": r, "pair_s": s, "values": self.curves[:, r, s].tolist()}
                for r in range(q) for s in range(r, q)
            ],
            **self.extra,
        }


def default_h_grid(grid: GridSpec, n: int = 60) -> np.ndarray:
    """``n`` equally spaced unit distances from 0 to half the domain diagonal."""
    return np.linspace(0.0, grid.half_diagonal(), n)


def draw_loadings(q: int, k: int, rng: np.random.Generator,
                  diag_range=(0.5, 1.0), offdiag_range=(-0.7, 0.7)) -> np.ndarray:
    A = np.zeros((q, k))
    free = lower_trapezoid_mask(q, k)
    for r in range(q):
        for j in range(k):
            if r == j:
                A[r, j] = rng.uniform(*diag_range)
            elif free[r, j]:
                A[r, j] = rng.uniform(*offdiag_range)
    return A


def simulate_dataset(cfg: SimConfig, rng: np.random.Generator | None = None,
                     A: np.ndarray | None = None, phi: np.ndarray | None = None
                     ) -> tuple[list[CountGrid], TruthRecord]:
    """Simulate ``N`` images of Poisson counts from a dense-GP spatial factor model.

    ``A`` and ``phi`` override the random draws of loadings and decays.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    grid = cfg.grid
    coords = grid.unit_coords()
    n = grid.n_px
    if phi is None:
        phi = rng.uniform(cfg.phi_min, cfg.phi_max, size=cfg.k)
    phi = np.asarray(phi, dtype=float)
    D = squareform(pdist(coords))
    try:
        L = [np.linalg.cholesky(np.exp(-ph * D)) for ph in phi]
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("Cholesky failed: duplicate pixel coordinates?") from None
    if A is None:
        A = draw_loadings(cfg.q, cfg.k, rng, cfg.diag_range, cfg.offdiag_range)
    A = np.asarray(A, dtype=float)
    eps = rng.standard_normal((cfg.N, cfg.k, n))
    V = np.stack([np.column_stack([L[j] @ eps[i, j] for j in range(cfg.k)]) for i in range(cfg.N)])
    W = V @ A.T + cfg.alpha
    y = rng.poisson(np.exp(W))
    labels = tuple(f"type{j}" for j in range(cfg.q))
    grids = [CountGrid(f"sim{i:03d}", grid, y[i], labels=labels) for i in range(cfg.N)]
    h = default_h_grid(grid, cfg.n_curve)
    truth = TruthRecord(A=A, phi=phi, alpha=cfg.alpha, V=V, W=W, h_unit=h,
                        curves=all_cross_corr(A, phi, h), l_star=cfg.l_star)
    return grids, truth


def coarsen_grid(grids: list[CountGrid], factor: int) -> list[CountGrid]:
    """Sum ``factor x factor`` pixel squares into one coarse pixel."""
    out = []
    for g in grids:
        gs = g.grid
        if gs.n_x % factor or gs.n_y % factor:
            raise ValidationError(f"factor {factor} does not divide grid {gs.n_x}x{gs.n_y}")
        if factor == 1:
            out.append(CountGrid(g.image_id, gs, g.counts.copy(), g.mask.copy(), g.labels))
            continue
        nx, ny = gs.n_x // factor, gs.n_y // factor
        c = g.counts.reshape(gs.n_y, gs.n_x, -1)
        c = c.reshape(ny, factor, nx, factor, -1).sum(axis=(1, 3)).reshape(nx * ny, -1)
        m = g.mask.reshape(ny, factor, nx, factor).all(axis=(1, 3)).ravel()
        new = GridSpec(nx, ny, gs.scale, gs.extent_x, gs.extent_y)
        out.append(CountGrid(g.image_id, new, c, m, g.labels))
    return out


def write_truth(truth: TruthRecord, path: str | Path, header: dict | None = None) -> None:
    payload = truth.to_json()
    payload.update(header or {})
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def sim_config_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    for key in ("extent", "diag_range", "offdiag_range"):
        d[key] = list(d[key])
    return d
