"""Meshed Gaussian processes on gridded domains.

The domain is tiled into blocks; each block is conditioned on a small set of parent
blocks through a DAG, so the joint density of a latent field factorizes as

    p(v) = prod_s N(v_s; H_s v_[s], R_s)

with ``H_s = C_{s,[s]} C_{[s],[s]}^{-1}`` and ``R_s = C_{s,s} - H_s C_{[s],s}``.
All conditional matrices depend only on the mesh, the pixel coordinates and the
decay of the exponential kernel, so they are shared by every subject on the grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from .preprocess import GridSpec

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
JITTER = 1e-8


class DegenerateBlockError(np.linalg.LinAlgError):
    def __init__(self, block: int, msg: str = ""):
        super().__init__(f"numerically degenerate covariance in block {block}{': ' + msg if msg else ''}")
        self.block = block


@dataclass
class MeshGraph:
    """Partition of pixels into blocks plus the parent DAG over blocks.

    Block ids index ``blocks``; ``topo_order`` lists them so every parent precedes
    its children. ``parent_pixels[s]`` is the concatenation of the parents' pixels
    in the order of ``parents[s]``.
    """

    blocks: list[np.ndarray]
    parents: list[list[int]]
    topo_order: list[int] = None
    n_px: int = None
    tiles: list[tuple[int, int]] = None
    children: list[list[int]] = field(init=False)
    parent_pixels: list[np.ndarray] = field(init=False)
    child_slices: list[list[tuple[int, slice]]] = field(init=False)
    colors: list[int] = field(init=False)

    def __post_init__(self):
        M = len(self.blocks)
        if M == 0:
            raise ValueError("mesh has no blocks")
        self.blocks = [np.asarray(b, dtype=np.int64) for b in self.blocks]
        self.parents = [list(map(int, p)) for p in self.parents]
        if self.topo_order is None:
            self.topo_order = list(range(M))
        if self.n_px is None:
            self.n_px = int(max(b.max() for b in self.blocks if b.size) + 1)
        pos = {s: t for t, s in enumerate(self.topo_order)}
        if sorted(pos) != list(range(M)):
            raise ValueError("topo_order must be a permutation of block ids")
        for s, par in enumerate(self.parents):
            for p in par:
                if pos[p] >= pos[s]:
                    raise ValueError(f"parent {p} of block {s} does not precede it")
        allpix = np.concatenate(self.blocks)
        if np.unique(allpix).size != allpix.size:
            raise ValueError("blocks overlap")
        self.children = [[] for _ in range(M)]
        for s in self.topo_order:
            for p in self.parents[s]:
                self.children[p].append(s)
        self.parent_pixels = [
            np.concatenate([self.blocks[p] for p in par]) if par else np.zeros(0, dtype=np.int64)
            for par in self.parents
        ]
        self.child_slices = [[] for _ in range(M)]
        for c in range(M):
            off = 0
            for p in self.parents[c]:
                n = self.blocks[p].size
                self.child_slices[p].append((c, slice(off, off + n)))
                off += n
        self.colors = self._color()

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def pixels(self) -> np.ndarray:
        return np.sort(np.concatenate(self.blocks))

    def markov_blanket(self, s: int) -> set[int]:
        nb = set(self.parents[s]) | set(self.children[s])
        for c in self.children[s]:
            nb.update(self.parents[c])
        nb.discard(s)
        return nb

    def _color(self) -> list[int]:
        # greedy coloring of the moral graph; same-color blocks are conditionally independent
        colors = [-1] * self.n_blocks
        for s in self.topo_order:
            used = {colors[b] for b in self.markov_blanket(s)}
            c = 0
            while c in used:
                c += 1
            colors[s] = c
        return colors

    def color_groups(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for s in self.topo_order:
            groups.setdefault(self.colors[s], []).append(s)
        return [groups[c] for c in sorted(groups)]


def _split(n: int, t: int) -> list[np.ndarray]:
    return np.array_split(np.arange(n), math.ceil(n / t))


def build_mesh(grid: GridSpec, tile: tuple[int, int] = (5, 5), mask=None,
               parents: str = "west_south") -> MeshGraph:
    """Tile ``grid`` into axis-aligned blocks of at most ``tile`` pixels.

    ``parents="west_south"`` links each tile to its west and south neighbours;
    ``"all_preceding"`` links it to every earlier tile (an exact GP factorization).
    With a pixel ``mask``, missing pixels leave their block; empty blocks are removed
    and their children inherit the removed block's parents.
    """
    t_x, t_y = tile
    if t_x < 1 or t_y < 1:
        raise ValueError("tile sizes must be >= 1")
    if grid.n_px == 0:
        raise ValueError("empty grid")
    xs, ys = _split(grid.n_x, t_x), _split(grid.n_y, t_y)
    n_tx = len(xs)
    blocks, tiles, par = [], [], []
    for ty, yi in enumerate(ys):
        for tx, xi in enumerate(xs):
            gx, gy = np.meshgrid(xi, yi)
            blocks.append(np.sort(grid.pixel_index(gx.ravel(), gy.ravel())))
            tiles.append((tx, ty))
            b = ty * n_tx + tx
            if parents == "west_south":
                p = []
                if ty > 0:
                    p.append(b - n_tx)
                if tx > 0:
                    p.append(b - 1)
            elif parents == "all_preceding":
                p = list(range(b))
            else:
                raise ValueError(f"unknown parent rule {parents!r}")
            par.append(p)

    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        keep_pix = np.flatnonzero(mask)
        blocks = [b[np.isin(b, keep_pix)] for b in blocks]
        resolved: list[list[int]] = []
        for s, p in enumerate(par):
            new = []
            for q in p:
                new.extend(resolved[q] if blocks[q].size == 0 else [q])
            resolved.append(sorted(set(new)))
        keep = [s for s in range(len(blocks)) if blocks[s].size > 0]
        if not keep:
            raise ValueError("mask removes every pixel")
        remap = {s: i for i, s in enumerate(keep)}
        blocks = [blocks[s] for s in keep]
        tiles = [tiles[s] for s in keep]
        par = [[remap[q] for q in resolved[s]] for s in keep]

    return MeshGraph(blocks=blocks, parents=par, n_px=grid.n_px, tiles=tiles)


@dataclass
class BlockFactors:
    """Conditional factors of one latent process (one decay) on one mesh."""

    phi: float
    H: list[np.ndarray]
    R_chol: list[np.ndarray]
    R_inv: list[np.ndarray]
    logdet: np.ndarray  # sum log diag(R_chol) per block
    jitter_blocks: list[int] = field(default_factory=list)


def _chol(mat: np.ndarray, block: int, jittered: list[int]) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    try:
        L = np.linalg.cholesky(mat + JITTER * np.eye(mat.shape[0]))
    except np.linalg.LinAlgError:
        raise DegenerateBlockError(block) from None
    logger.warning("added jitter %.1e to block %d", JITTER, block)
    jittered.append(block)
    return L


def _block_geometry(mesh: MeshGraph, coords: np.ndarray) -> tuple[list[int], list[tuple]]:
    """Group blocks whose pixels and parent pixels are translates of each other.

    Returns, per block, the index of its geometry class, and per class the
    distance matrices ``(D_ss, D_pp, D_sp)``.
    """
    key = (id(mesh), coords.shape, coords.tobytes())
    cache = getattr(mesh, "_geom_cache", None)
    if cache is not None and cache[0] == key:
        return cache[1], cache[2]
    classes: dict[bytes, int] = {}
    cls_of, dists = [], []
    for s in range(mesh.n_blocks):
        cs = coords[mesh.blocks[s]]
        cp = coords[mesh.parent_pixels[s]]
        origin = cs[0]
        sig = np.round(np.concatenate([cs - origin, cp - origin]), 9)
        sig_key = (cs.shape[0], cp.shape[0], sig.tobytes())
        if sig_key not in classes:
            classes[sig_key] = len(dists)
            dists.append((cdist(cs, cs), cdist(cp, cp), cdist(cs, cp)))
        cls_of.append(classes[sig_key])
    mesh._geom_cache = (key, cls_of, dists)
    return cls_of, dists


def compute_factors(mesh: MeshGraph, coords: np.ndarray, phi: float) -> BlockFactors:
    """H/R factors of the exponential-kernel MGP with decay ``phi``.

    Blocks that are translates of each other (with their parents) share arrays.
    """
    coords = np.asarray(coords, dtype=float)
    cls_of, dists = _block_geometry(mesh, coords)
    per_class = []
    jit: list[int] = []
    for c, (Dss, Dpp, Dsp) in enumerate(dists):
        s = cls_of.index(c)
        Css = np.exp(-phi * Dss)
        if Dpp.size:
            Csp = np.exp(-phi * Dsp)
            Lp = _chol(np.exp(-phi * Dpp), s, jit)
            Hs = linalg.cho_solve((Lp, True), Csp.T, check_finite=False).T
            R = Css - Hs @ Csp.T
            R = 0.5 * (R + R.T)
        else:
            Hs = np.zeros((Dss.shape[0], 0))
            R = Css
        L = _chol(R, s, jit)
        Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
        per_class.append((Hs, L, Linv.T @ Linv, np.log(np.diag(L)).sum()))
    H = [per_class[c][0] for c in cls_of]
    Rc = [per_class[c][1] for c in cls_of]
    Ri = [per_class[c][2] for c in cls_of]
    logdet = np.array([per_class[c][3] for c in cls_of])
    return BlockFactors(phi=float(phi), H=H, R_chol=Rc, R_inv=Ri, logdet=logdet, jitter_blocks=jit)


def block_residual(v: np.ndarray, factors: BlockFactors, mesh: MeshGraph, s: int) -> np.ndarray:
    """``v_s - H_s v_[s]`` for fields stacked on the last axis."""
    res = v[..., mesh.blocks[s]]
    pp = mesh.parent_pixels[s]
    if pp.size:
        res = res - v[..., pp] @ factors.H[s].T
    return res


def block_logdensity(v: np.ndarray, factors: BlockFactors, mesh: MeshGraph, s: int) -> np.ndarray:
    e = block_residual(v, factors, mesh, s)
    quad = np.einsum("...a,ab,...b->...", e, factors.R_inv[s], e)
    n = mesh.blocks[s].size
    return -0.5 * quad - factors.logdet[s] - 0.5 * n * LOG_2PI


def mgp_logdensity(v: np.ndarray, factors: BlockFactors, mesh: MeshGraph) -> np.ndarray | float:
    """Sum of block conditional log-densities; ``v`` is ``(..., n_px)``."""
    v = np.asarray(v, dtype=float)
    total = sum(block_logdensity(v, factors, mesh, s) for s in range(mesh.n_blocks))
    return float(total) if np.ndim(total) == 0 else total


def mgp_sample_prior(factors: BlockFactors, mesh: MeshGraph, rng: np.random.Generator | None = None,
                     size: tuple[int, ...] = (), z: np.ndarray | None = None) -> np.ndarray:
    """Ancestral draw ``v_s = H_s v_[s] + R_chol_s z_s`` in topological order.

    Pixels not in any block stay at zero. Passing ``z`` (shape ``size + (n_px,)``)
    replaces the standard-normal innovations.
    """
    if z is None:
        z = rng.standard_normal(size + (mesh.n_px,))
    v = np.zeros(z.shape)
    for s in mesh.topo_order:
        b = mesh.blocks[s]
        val = z[..., b] @ factors.R_chol[s].T
        pp = mesh.parent_pixels[s]
        if pp.size:
            val = val + v[..., pp] @ factors.H[s].T
        v[..., b] = val
    return v


def mgp_whiten(v: np.ndarray, factors: BlockFactors, mesh: MeshGraph) -> np.ndarray:
    """Inverse of :func:`mgp_sample_prior`: innovations ``z`` that reproduce ``v``."""
    z = np.zeros(v.shape)
    for s in mesh.topo_order:
        e = block_residual(v, factors, mesh, s)
        flat = e.reshape(-1, e.shape[-1])
        zs = linalg.solve_triangular(factors.R_chol[s], flat.T, lower=True, check_finite=False).T
        z[..., mesh.blocks[s]] = zs.reshape(e.shape)
    return z


def mgp_precision(factors: BlockFactors, mesh: MeshGraph) -> np.ndarray:
    """Dense joint precision ``(I - H)^T R^{-1} (I - H)`` over the mesh pixels (small meshes only)."""
    pix = mesh.pixels
    pos = {int(p): i for i, p in enumerate(pix)}
    n = pix.size
    Q = np.zeros((n, n))
    for s in range(mesh.n_blocks):
        rows = [pos[int(p)] for p in mesh.blocks[s]]
        cols = [pos[int(p)] for p in mesh.parent_pixels[s]]
        G = np.zeros((len(rows), n))
        G[:, rows] = np.eye(len(rows))
        if cols:
            G[:, cols] -= factors.H[s]
        Q += G.T @ factors.R_inv[s] @ G
    return Q
