"""Posterior draw containers and their on-disk format.

A store directory holds ``store.json`` (metadata), one ``draws_chain<c>.csv`` per
chain with rows ``param,index,iteration,value`` and, when pointwise log-likelihoods
were kept, ``loglik_chain<c>.bin`` (little-endian float64, row-major ``(S, n_obs)``)
described by ``loglik_chain<c>.json``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARAMS = ("A", "B", "alpha", "phi")


@dataclass
class ChainDraws:
    A: np.ndarray  # (S, q, k)
    B: np.ndarray  # (S, p, q)
    alpha: np.ndarray  # (S, N, q)
    phi: np.ndarray  # (S, k)
    iterations: np.ndarray  # (S,)
    loglik: np.ndarray | None = None  # (S, n_obs)
    accept_rates: dict = field(default_factory=dict)
    v_mean: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.A.shape[0]


@dataclass
class DrawsStore:
    chains: list[ChainDraws]
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def labels(self) -> list[str]:
        return list(self.meta.get("labels", []))

    @property
    def l_star(self) -> float:
        return float(self.meta.get("grid", {}).get("scale", 1.0))

    def stacked(self, name: str) -> np.ndarray:
        """Draws of ``name`` with a leading chain axis; chains are truncated to equal length."""
        S = min(c.n_draws for c in self.chains)
        return np.stack([getattr(c, name)[:S] for c in self.chains])

    def pooled(self, name: str) -> np.ndarray:
        return np.concatenate([getattr(c, name) for c in self.chains])

    def pooled_loglik(self) -> np.ndarray:
        if any(c.loglik is None for c in self.chains):
            raise ValueError("store has no pointwise log-likelihood draws")
        return np.concatenate([c.loglik for c in self.chains])


def _fmt(x: float) -> str:
    return repr(float(x))


def write_store(store: DrawsStore, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(store.meta)
    meta["n_chains"] = store.n_chains
    meta["accept_rates"] = [c.accept_rates for c in store.chains]
    with open(path / "store.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    header = f"# seed={meta.get('seed')} config_hash={meta.get('config_hash')}\n"
    for ci, ch in enumerate(store.chains):
        with open(path / f"draws_chain{ci}.csv", "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "index", "iteration", "value"])
            for name in PARAMS:
                arr = getattr(ch, name)
                for s, it in enumerate(ch.iterations):
                    for idx in np.ndindex(arr.shape[1:]):
                        w.writerow([name, ":".join(map(str, idx)), int(it), _fmt(arr[(s,) + idx])])
        if ch.loglik is not None:
            ll = np.ascontiguousarray(ch.loglik, dtype="<f8")
            (path / f"loglik_chain{ci}.bin").write_bytes(ll.tobytes())
            with open(path / f"loglik_chain{ci}.json", "w") as fh:
                json.dump({
                    "dtype": "<f8",
                    "order": "C",
                    "shape": list(ll.shape),
                    "observation": "subject-major (subject, pixel); types summed within pixel",
                    "labels": meta.get("labels", []),
                    "seed": meta.get("seed"),
                    "config_hash": meta.get("config_hash"),
                }, fh, indent=2, sort_keys=True)
                fh.write("\n")


def read_store(path: str | Path) -> DrawsStore:
    path = Path(path)
    with open(path / "store.json") as fh:
        meta = json.load(fh)
    n_chains = meta.pop("n_chains")
    rates = meta.pop("accept_rates", [{}] * n_chains)
    chains = []
    for ci in range(n_chains):
        vals: dict[str, dict[tuple[int, ...], dict[int, float]]] = {p: {} for p in PARAMS}
        iters: set[int] = set()
        with open(path / f"draws_chain{ci}.csv", newline="") as fh:
            lines = (ln for ln in fh if not ln.startswith("#"))
            for rec in csv.DictReader(lines):
                idx = tuple(int(i) for i in rec["index"].split(":")) if rec["index"] else ()
                it = int(rec["iteration"])
                iters.add(it)
                vals[rec["param"]].setdefault(idx, {})[it] = float(rec["value"])
        order = sorted(iters)
        pos = {it: s for s, it in enumerate(order)}
        q, k, N = len(meta["labels"]), meta["k"], meta["n_subjects"]
        p = meta.get("p", 0)
        shapes = {"A": (q, k), "B": (p, q), "alpha": (N, q), "phi": (k,)}
        arrays = {}
        for name in PARAMS:
            arr = np.zeros((len(order),) + shapes[name])
            for idx, series in vals[name].items():
                for it, x in series.items():
                    arr[(pos[it],) + idx] = x
            arrays[name] = arr
        ll = None
        llpath = path / f"loglik_chain{ci}.bin"
        if llpath.exists():
            with open(path / f"loglik_chain{ci}.json") as fh:
                hdr = json.load(fh)
            ll = np.frombuffer(llpath.read_bytes(), dtype=hdr["dtype"]).reshape(hdr["shape"]).astype(float)
        chains.append(ChainDraws(iterations=np.array(order, dtype=np.int64), loglik=ll,
                                 accept_rates=rates[ci], **arrays))
    return DrawsStore(chains=chains, meta=meta)
