"""Point-pattern rescaling, binning onto pixel grids, and count-grid I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_PIXEL_COUNT = 1_000_000


class ValidationError(ValueError):
    """Raised when input data violate a precondition."""


@dataclass
class PointPattern:
    image_id: str
    x: np.ndarray
    y: np.ndarray
    cell_type: np.ndarray
    extent: tuple[float, float]
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.cell_type = np.asarray(self.cell_type, dtype=object)
        if not (self.x.shape == self.y.shape == self.cell_type.shape):
            raise ValidationError(f"image {self.image_id}: ragged point arrays")

    @property
    def n_points(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class GridSpec:
    """Pixel lattice over one image domain ``[0, extent_x] x [0, extent_y]`` in unit coordinates.

    Two images share a ``GridSpec`` exactly when their pixel centers coincide, which is
    what the shared meshed-GP factors require.
    """

    n_x: int
    n_y: int
    scale: float = 1.0
    extent_x: float = 1.0
    extent_y: float = 1.0

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValidationError("grid must have n_x, n_y >= 1")
        if not self.scale > 0:
            raise ValidationError("grid scale must be positive")
        if not (self.extent_x > 0 and self.extent_y > 0):
            raise ValidationError("grid extent must be positive")

    @property
    def n_px(self) -> int:
        return self.n_x * self.n_y

    @property
    def pixel_size(self) -> tuple[float, float]:
        """Pixel side lengths in microns."""
        return (self.extent_x * self.scale / self.n_x, self.extent_y * self.scale / self.n_y)

    def pixel_index(self, ix, iy):
        return np.asarray(iy) * self.n_x + np.asarray(ix)

    def unit_coords(self) -> np.ndarray:
        """Pixel centers, row-major with x varying fastest, shape ``(n_px, 2)``."""
        cx = (np.arange(self.n_x) + 0.5) / self.n_x * self.extent_x
        cy = (np.arange(self.n_y) + 0.5) / self.n_y * self.extent_y
        gx, gy = np.meshgrid(cx, cy)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.extent_x, self.extent_y)

    def to_dict(self) -> dict:
        return {
            "n_x": self.n_x,
            "n_y": self.n_y,
            "scale": self.scale,
            "extent_x": self.extent_x,
            "extent_y": self.extent_y,
        }


@dataclass
class CountGrid:
    image_id: str
    grid: GridSpec
    counts: np.ndarray
    mask: np.ndarray = field(default=None)
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.grid.n_px:
            raise ValidationError(
                f"image {self.image_id}: counts must have shape (n_px={self.grid.n_px}, q)"
            )
        if np.any(self.counts < 0):
            raise ValidationError(f"image {self.image_id}: negative counts")
        if np.any(self.counts > MAX_PIXEL_COUNT):
            raise ValidationError(f"image {self.image_id}: implausible pixel count > {MAX_PIXEL_COUNT}")
        if self.mask is None:
            self.mask = np.ones(self.grid.n_px, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.grid.n_px,):
                raise ValidationError(f"image {self.image_id}: mask must have length n_px")

    @property
    def q(self) -> int:
        return self.counts.shape[1]

    @property
    def unit_coords(self) -> np.ndarray:
        return self.grid.unit_coords()

    def observed_total(self) -> np.ndarray:
        """Per-type totals over unmasked pixels."""
        return self.counts[self.mask].sum(axis=0)


def label_order(patterns: Iterable[PointPattern]) -> tuple[str, ...]:
    """Dataset-wide cell-type labels in lexicographic order."""
    labels = set()
    for pat in patterns:
        labels.update(str(c) for c in pat.cell_type)
    return tuple(sorted(labels))


def rescale_dataset(patterns: Sequence[PointPattern]) -> tuple[list[PointPattern], float]:
    """Shift every image to the origin and divide all coordinates by the largest axis length.

    Returns the rescaled patterns and ``l_star`` in the input units (microns).
    Applying it to already rescaled data is a no-op because the largest extent is then 1.
    """
    if len(patterns) == 0:
        raise ValidationError("empty dataset")
    for pat in patterns:
        if not (pat.extent[0] > 0 and pat.extent[1] > 0):
            raise ValidationError(f"image {pat.image_id}: zero extent")
    l_star = max(max(p.extent) for p in patterns)
    out = []
    for pat in patterns:
        ox, oy = pat.origin
        out.append(
            PointPattern(
                image_id=pat.image_id,
                x=(pat.x - ox) / l_star,
                y=(pat.y - oy) / l_star,
                cell_type=pat.cell_type.copy(),
                extent=(pat.extent[0] / l_star, pat.extent[1] / l_star),
            )
        )
    return out, float(l_star)


def grid_for_pattern(pattern: PointPattern, l_star: float, pixel_size: float = 70.0,
                     n_x: int | None = None, n_y: int | None = None) -> GridSpec:
    """GridSpec for a rescaled pattern; ``n_x``/``n_y`` default to a target pixel size in microns."""
    ex, ey = pattern.extent
    if n_x is None:
        n_x = max(1, int(round(ex * l_star / pixel_size)))
    if n_y is None:
        n_y = max(1, int(round(ey * l_star / pixel_size)))
    return GridSpec(n_x=n_x, n_y=n_y, scale=l_star, extent_x=ex, extent_y=ey)


def _cell_index(u: np.ndarray, n: int, extent: float) -> np.ndarray:
    # half-open cells [a, b); the top/right domain edge belongs to the last cell
    idx = np.floor(u / extent * n).astype(np.int64)
    idx[u == extent] = n - 1
    return idx


def bin_pattern(pattern: PointPattern, grid: GridSpec,
                labels: Sequence[str] | None = None) -> CountGrid:
    """Count points of each type falling in each pixel of ``grid``."""
    if labels is None:
        labels = label_order([pattern])
    labels = tuple(labels)
    col = {lab: j for j, lab in enumerate(labels)}
    tol = 1e-12
    x, y = pattern.x, pattern.y
    bad = (x < -tol) | (y < -tol) | (x > grid.extent_x + tol) | (y > grid.extent_y + tol)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise ValidationError(
            f"image {pattern.image_id}: point {row} at ({x[row]:.6g}, {y[row]:.6g}) outside domain"
        )
    x = np.clip(x, 0.0, grid.extent_x)
    y = np.clip(y, 0.0, grid.extent_y)
    try:
        types = np.array([col[str(c)] for c in pattern.cell_type], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"image {pattern.image_id}: unknown cell type {exc}") from None
    ix = _cell_index(x, grid.n_x, grid.extent_x)
    iy = _cell_index(y, grid.n_y, grid.extent_y)
    pix = grid.pixel_index(ix, iy)
    counts = np.zeros((grid.n_px, len(labels)), dtype=np.int64)
    np.add.at(counts, (pix, types), 1)
    return CountGrid(pattern.image_id, grid, counts, labels=labels)


def apply_mask(grid: CountGrid, missing_pixels: Iterable[int]) -> CountGrid:
    """Return a copy of ``grid`` with ``missing_pixels`` flagged as unobserved."""
    missing = np.fromiter((int(p) for p in missing_pixels), dtype=np.int64)
    if missing.size and (missing.min() < 0 or missing.max() >= grid.grid.n_px):
        raise ValidationError(f"image {grid.image_id}: missing pixel index out of range")
    mask = np.ones(grid.grid.n_px, dtype=bool)
    mask[missing] = False
    return replace(grid, counts=grid.counts.copy(), mask=mask)


# ---------------------------------------------------------------------------
# file formats


def read_points_csv(path: str | Path) -> list[PointPattern]:
    """Read ``image_id,x,y,cell_type`` rows; each image's extent is its bounding box."""
    rows: dict[str, list[tuple[float, float, str]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "x", "y", "cell_type"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                x, y = float(rec["x"]), float(rec["y"])
            except (TypeError, ValueError):
                raise ValidationError(f"{path}: row {lineno}: non-numeric coordinate") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValidationError(f"{path}: row {lineno}: non-finite coordinate")
            rows.setdefault(rec["image_id"], []).append((x, y, rec["cell_type"]))
    patterns = []
    for image_id, pts in rows.items():
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        lab = np.array([p[2] for p in pts], dtype=object)
        ox, oy = x.min(), y.min()
        patterns.append(
            PointPattern(image_id, x, y, lab, extent=(x.max() - ox, y.max() - oy), origin=(ox, oy))
        )
    return patterns


def check_extents(patterns: Sequence[PointPattern], extents: dict[str, tuple[float, float, float, float]]):
    """Attach explicit ``(x0, y0, l_x, l_y)`` extents and verify every point is inside."""
    for pat in patterns:
        if pat.image_id not in extents:
            continue
        x0, y0, lx, ly = extents[pat.image_id]
        pat.origin = (x0, y0)
        pat.extent = (lx, ly)
        bad = (pat.x < x0) | (pat.y < y0) | (pat.x > x0 + lx) | (pat.y > y0 + ly)
        if np.any(bad):
            row = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"image {pat.image_id}: point {row} ({pat.x[row]}, {pat.y[row]}) outside extent"
            )


def write_counts(grids: Sequence[CountGrid], counts_path: str | Path, manifest_path: str | Path,
                 extra: dict | None = None, header: dict | None = None) -> None:
    """Write long-format ``image_id,px,py,cell_type,count`` rows plus a JSON manifest."""
    if not grids:
        raise ValidationError("no count grids to write")
    labels = grids[0].labels
    with open(counts_path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "px", "py", "cell_type", "count"])
        for g in grids:
            nx = g.grid.n_x
            for p in range(g.grid.n_px):
                for j, lab in enumerate(labels):
                    w.writerow([g.image_id, p % nx, p // nx, lab, int(g.counts[p, j])])
    manifest = {
        "labels": list(labels),
        "images": [
            {
                "image_id": g.image_id,
                "grid": g.grid.to_dict(),
                "missing_pixels": np.flatnonzero(~g.mask).tolist(),
            }
            for g in grids
        ],
    }
    manifest.update(header or {})
    manifest.update(extra or {})
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_counts(counts_path: str | Path, manifest_path: str | Path) -> list[CountGrid]:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    labels = tuple(manifest["labels"])
    col = {lab: j for j, lab in enumerate(labels)}
    specs = {im["image_id"]: im for im in manifest["images"]}
    arrays = {
        iid: np.zeros((GridSpec(**im["grid"]).n_px, len(labels)), dtype=np.int64)
        for iid, im in specs.items()
    }
    with open(counts_path, newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        for lineno, rec in enumerate(csv.DictReader(lines), start=2):
            iid = rec["image_id"]
            if iid not in specs:
                raise ValidationError(f"{counts_path}: row {lineno}: image {iid!r} not in manifest")
            nx = specs[iid]["grid"]["n_x"]
            p = int(rec["py"]) * nx + int(rec["px"])
            arrays[iid][p, col[rec["cell_type"]]] = int(rec["count"])
    out = []
    for iid, im in specs.items():
        g = CountGrid(iid, GridSpec(**im["grid"]), arrays[iid], labels=labels)
        if im.get("missing_pixels"):
            g = apply_mask(g, im["missing_pixels"])
        out.append(g)
    return out
