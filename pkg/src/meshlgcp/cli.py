"""Batch command line: ``meshlgcp <command> --config run.yaml``.

Commands
--------
bin        point CSV -> count grid CSV + manifest
simulate   synthetic count grids + ground-truth JSON
fit        count grids -> posterior draw store
xcorr      draw store -> cross-correlation curve CSV
diagnose   draw store -> convergence CSV + WAIC JSON (``--sweep-k`` fits several k)
compare    two draw stores -> group-difference curve CSV

The YAML config has the sections ``paths``, ``grid``, ``sampler`` and ``simulate``;
every output records the config hash and seed. Exit codes: 0 success, 2 invalid
input or config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics as diag
from .draws import read_store, write_store
from .kernel import DegenerateLoadingsError
from .meshedgp import DegenerateBlockError
from .preprocess import (ValidationError, bin_pattern, check_extents, grid_for_pattern, label_order,
                         read_counts, read_points_csv, rescale_dataset, write_counts)
from .sampler import NumericalFailure, SamplerConfig, run_chain
from .simulate import SimConfig, sim_config_dict, simulate_dataset, write_truth

logger = logging.getLogger("meshlgcp")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

_PATH_DEFAULTS = {
    "points": "points.csv",
    "counts": "counts.csv",
    "manifest": "manifest.json",
    "truth": "truth.json",
    "draws": "draws",
    "out_dir": "out",
    "draws_b": None,
}


@dataclass
class RunConfig:
    paths: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    simulate: SimConfig = field(default_factory=SimConfig)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        unknown = set(raw) - {"paths", "grid", "sampler", "simulate"}
        if unknown:
            raise ValidationError(f"{path}: unknown sections {sorted(unknown)}")
        ov = {k: v for k, v in (overrides or {}).items() if v is not None}
        samp = dict(raw.get("sampler") or {})
        sim = dict(raw.get("simulate") or {})
        for key in ("seed", "threads", "k", "tile"):
            if key in ov:
                samp[key] = ov[key]
        if "seed" in ov:
            sim["seed"] = ov["seed"]
        paths = {**_PATH_DEFAULTS, **(raw.get("paths") or {})}
        grid = dict(raw.get("grid") or {})
        unknown_grid = set(grid) - {"pixel_size", "n_x", "n_y", "extents"}
        if unknown_grid:
            raise ValidationError(f"{path}: unknown grid keys {sorted(unknown_grid)}")
        return cls(paths=paths, grid=grid, sampler=_build(SamplerConfig, samp, "sampler"),
                   simulate=_build(SimConfig, sim, "simulate"), base_dir=path.parent)

    def path(self, key: str) -> Path:
        p = self.paths.get(key)
        if p is None:
            raise ValidationError(f"config paths.{key} is not set")
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        samp = self.sampler.to_dict()
        samp.pop("threads")
        return {"paths": {k: v for k, v in sorted(self.paths.items())}, "grid": self.grid,
                "sampler": samp, "simulate": sim_config_dict(self.simulate)}

    def hash(self) -> str:
        """Hash of the validated config; thread count excluded since it never changes results."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValidationError(f"unknown {section} keys {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValidationError(f"{section}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def _header(cfg: RunConfig, seed) -> dict:
    return {"config_hash": cfg.hash(), "seed": seed}


def _load_grids(cfg: RunConfig):
    try:
        return read_counts(cfg.path("counts"), cfg.path("manifest"))
    except FileNotFoundError as exc:
        raise ValidationError(f"missing input: {exc.filename}") from None


def _load_store(path: Path):
    if not (path / "store.json").exists():
        raise ValidationError(f"no draw store at {path}")
    return read_store(path)


def cmd_bin(cfg: RunConfig, args) -> int:
    try:
        patterns = read_points_csv(cfg.path("points"))
    except FileNotFoundError as exc:
        raise ValidationError(f"missing input: {exc.filename}") from None
    extents = cfg.grid.get("extents")
    if extents:
        check_extents(patterns, {k: tuple(v) for k, v in extents.items()})
    labels = label_order(patterns)
    scaled, l_star = rescale_dataset(patterns)
    grids = []
    for pat in scaled:
        spec = grid_for_pattern(pat, l_star, cfg.grid.get("pixel_size", 70.0),
                                cfg.grid.get("n_x"), cfg.grid.get("n_y"))
        grids.append(bin_pattern(pat, spec, labels))
    write_counts(grids, cfg.path("counts"), cfg.path("manifest"), header=_header(cfg, None))
    logger.info("binned %d images, %d cell types, l*=%g", len(grids), len(labels), l_star)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    sc = cfg.simulate
    grids, truth = simulate_dataset(sc)
    head = _header(cfg, sc.seed)
    write_counts(grids, cfg.path("counts"), cfg.path("manifest"), header=head)
    write_truth(truth, cfg.path("truth"), {**head, "simulate": sim_config_dict(sc)})
    logger.info("simulated %d images", len(grids))
    return EXIT_OK


def _fit(cfg: RunConfig, grids, sampler_cfg: SamplerConfig, out: Path):
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    store = run_chain(grids, sampler_cfg)
    store.meta["sampler_hash"] = store.meta["config_hash"]
    store.meta["config_hash"] = cfg.hash()
    write_store(store, out)
    finished = _dt.datetime.now(_dt.timezone.utc).isoformat()
    with open(out / "run.log", "w") as fh:
        fh.write(f"started {started}\nfinished {finished}\nthreads {sampler_cfg.threads}\n")
        fh.write(f"acceptance {json.dumps([c.accept_rates for c in store.chains], sort_keys=True)}\n")
    return store


def cmd_fit(cfg: RunConfig, args) -> int:
    grids = _load_grids(cfg)
    _fit(cfg, grids, cfg.sampler, cfg.path("draws"))
    logger.info("wrote draw store to %s", cfg.path("draws"))
    return EXIT_OK


def _out(cfg: RunConfig, args, name: str) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    d = cfg.path("out_dir")
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def cmd_xcorr(cfg: RunConfig, args) -> int:
    store = _load_store(Path(args.draws) if args.draws else cfg.path("draws"))
    curves = diag.all_xcorr_summaries(store)
    if curves[0].n_excluded:
        logger.warning("%d draws excluded (zero loadings row)", curves[0].n_excluded)
    diag.write_curves(curves, _out(cfg, args, "curves.csv"), _header(cfg, store.meta.get("seed")))
    return EXIT_OK


def _diagnose_store(cfg: RunConfig, store, out_csv: Path, out_json: Path):
    head = _header(cfg, store.meta.get("seed"))
    rows = diag.curve_convergence(store)
    w = diag.waic(store.pooled_loglik())
    rows += [("lppd", None, None, None, w.lppd), ("p_waic", None, None, None, w.p_waic),
             ("waic", None, None, None, w.waic)]
    diag.write_diagnostics(rows, out_csv, head)
    diag.write_waic(w, out_json, {**head, "k": store.meta.get("k")})
    return w


def cmd_diagnose(cfg: RunConfig, args) -> int:
    if args.sweep_k:
        try:
            ks = [int(k) for k in args.sweep_k.split(",") if k.strip()]
        except ValueError:
            raise ValidationError(f"--sweep-k expects comma-separated integers, got {args.sweep_k!r}") from None
        if not ks:
            raise ValidationError("--sweep-k is empty")
        grids = _load_grids(cfg)
        table = []
        base = cfg.path("out_dir")
        base.mkdir(parents=True, exist_ok=True)
        for k in ks:
            sc = SamplerConfig(**{**cfg.sampler.to_dict(), "k": k, "store_loglik": True})
            store = _fit(cfg, grids, sc, base / f"draws_k{k}")
            w = _diagnose_store(cfg, store, base / f"diagnostics_k{k}.csv", base / f"waic_k{k}.json")
            table.append((k, w))
        path = _out(cfg, args, "waic_table.csv")
        with open(path, "w") as fh:
            fh.write(f"# config_hash={cfg.hash()}\n# seed={cfg.sampler.seed}\n")
            fh.write("k,lppd,p_waic,waic\n")
            for k, w in table:
                fh.write(f"{k},{w.lppd!r},{w.p_waic!r},{w.waic!r}\n")
        best = min(table, key=lambda t: t[1].waic)[0]
        logger.info("lowest WAIC at k=%d", best)
        return EXIT_OK
    store = _load_store(Path(args.draws) if args.draws else cfg.path("draws"))
    out_csv = _out(cfg, args, "diagnostics.csv")
    _diagnose_store(cfg, store, out_csv, out_csv.with_name("waic.json"))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    a = _load_store(Path(args.draws) if args.draws else cfg.path("draws"))
    b = _load_store(Path(args.draws_b) if args.draws_b else cfg.path("draws_b"))
    q = len(a.labels)
    h = diag.default_h_microns(a)
    curves = [diag.diff_curves(a, b, (r, s), h) for r in range(q) for s in range(r, q)]
    diag.write_curves(curves, _out(cfg, args, "difference.csv"), _header(cfg, a.meta.get("seed")))
    return EXIT_OK


COMMANDS = {
    "bin": cmd_bin,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "xcorr": cmd_xcorr,
    "diagnose": cmd_diagnose,
    "compare": cmd_compare,
}


def _tile(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must look like 5x5, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"tile must look like 5x5, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshlgcp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--tile", type=_tile, help="tile size in pixels, e.g. 5x5")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("xcorr", "diagnose", "compare"):
            p.add_argument("--draws", help="draw store directory (default: paths.draws)")
            p.add_argument("--output", help="output file (default: under paths.out_dir)")
        if name == "compare":
            p.add_argument("--draws-b", dest="draws_b", help="second draw store (default: paths.draws_b)")
        if name == "diagnose":
            p.add_argument("--sweep-k", dest="sweep_k", help="fit every k in a comma list and tabulate WAIC")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, {"seed": args.seed, "threads": args.threads,
                                           "k": args.k, "tile": args.tile})
        return COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalFailure, DegenerateBlockError, DegenerateLoadingsError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
