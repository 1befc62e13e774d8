"""Posterior summaries and model-checking metrics.

Cross-correlation curves with 95% bands, group differences, WAIC, rank-normalized
bulk ESS and split-R-hat, and the median absolute deviation between curves.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .draws import DrawsStore
from .kernel import DegenerateLoadingsError, all_cross_corr, pairs
from .preprocess import GridSpec, ValidationError

logger = logging.getLogger(__name__)

N_CURVE = 60


@dataclass
class CorrelationCurve:
    pair: tuple[int, int]
    h_microns: np.ndarray
    mean: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    n_draws: int = 0
    n_excluded: int = 0


@dataclass
class WaicResult:
    lppd: float
    p_waic: float
    waic: float

    def to_dict(self) -> dict:
        return {"lppd": self.lppd, "p_waic": self.p_waic, "waic": self.waic}


class Diagnostic(NamedTuple):
    value: float
    flag: str  # "" when the value is defined


# ---------------------------------------------------------------------------
# curves


def default_h_microns(store: DrawsStore, n: int = N_CURVE) -> np.ndarray:
    """``n`` equally spaced distances from 0 to half the domain diagonal, in microns."""
    grid = GridSpec(**store.meta["grid"])
    return np.linspace(0.0, grid.half_diagonal(), n) * grid.scale


def curve_draws(store: DrawsStore, h_microns: np.ndarray) -> tuple[np.ndarray, int]:
    """All-pair curves per pooled draw, ``(S, len(h), q, q)``, and the number of degenerate draws dropped."""
    h_unit = np.asarray(h_microns, dtype=float) / store.l_star
    A, phi = store.pooled("A"), store.pooled("phi")
    out, n_bad = [], 0
    for a, p in zip(A, phi):
        try:
            c = all_cross_corr(a, p, h_unit)
        except DegenerateLoadingsError:
            n_bad += 1
            continue
        idx = np.arange(c.shape[1])
        c[h_unit == 0, idx[:, None], idx[None, :]] = np.where(
            np.eye(len(idx), dtype=bool), 1.0, c[h_unit == 0][:, idx[:, None], idx[None, :]])
        out.append(c)
    if n_bad:
        logger.warning("excluded %d of %d draws with a zero loadings row", n_bad, len(A))
    if not out:
        raise DegenerateLoadingsError("every draw has a zero loadings row")
    return np.stack(out), n_bad


def _summarize(values: np.ndarray, pair, h_microns, n_bad: int) -> CorrelationCurve:
    lo, hi = np.quantile(values, [0.025, 0.975], axis=0)
    mean = values.mean(axis=0)
    return CorrelationCurve(tuple(pair), np.asarray(h_microns, dtype=float), mean,
                            np.minimum(lo, mean), np.maximum(hi, mean), values.shape[0], n_bad)


def xcorr_summary(store: DrawsStore, pair: tuple[int, int], h_microns=None) -> CorrelationCurve:
    """Posterior mean and central 95% band of the correlation curve of ``pair``.

    The curve depends on ``A`` only through ``A A^T``-type products, so column sign
    flips and factor permutations in the stored draws do not change it.
    """
    h = default_h_microns(store) if h_microns is None else np.asarray(h_microns, dtype=float)
    r, s = pair
    c, n_bad = curve_draws(store, h)
    return _summarize(c[:, :, r, s], (r, s), h, n_bad)


def all_xcorr_summaries(store: DrawsStore, h_microns=None) -> list[CorrelationCurve]:
    h = default_h_microns(store) if h_microns is None else np.asarray(h_microns, dtype=float)
    c, n_bad = curve_draws(store, h)
    q = c.shape[-1]
    return [_summarize(c[:, :, r, s], (r, s), h, n_bad) for r, s in pairs(q)]


def diff_curves(group_a: DrawsStore, group_b: DrawsStore, pair: tuple[int, int],
                h_microns=None) -> CorrelationCurve:
    """Curve of ``rho^A - rho^B`` over draws paired by index; the shorter store is cycled."""
    if group_a.labels != group_b.labels:
        raise ValidationError(f"cell-type sets differ: {group_a.labels} vs {group_b.labels}")
    h = default_h_microns(group_a) if h_microns is None else np.asarray(h_microns, dtype=float)
    r, s = pair
    ca, bad_a = curve_draws(group_a, h)
    cb, bad_b = curve_draws(group_b, h)
    n = max(len(ca), len(cb))
    d = ca[np.arange(n) % len(ca), :, r, s] - cb[np.arange(n) % len(cb), :, r, s]
    lo, hi = np.quantile(d, [0.025, 0.975], axis=0)
    mean = d.mean(axis=0)
    return CorrelationCurve((r, s), h, mean, np.minimum(lo, mean), np.maximum(hi, mean), n, bad_a + bad_b)


def mad_curves(fitted, truth) -> float:
    """Median of ``|fitted - truth|`` over every entry (distances, and pairs if stacked)."""
    fitted = np.asarray(fitted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if fitted.shape != truth.shape:
        raise ValidationError(f"curve shapes differ: {fitted.shape} vs {truth.shape}")
    return float(np.median(np.abs(fitted - truth)))


def aggregate_mad(fitted: np.ndarray, truth: np.ndarray, include_diagonal: bool = False) -> float:
    """MAD over the distinct-type pairs ``r < s`` of ``(len(h), q, q)`` curve stacks.

    ``include_diagonal=True`` adds the marginal (``r == s``) curves.
    """
    q = fitted.shape[-1]
    iu = np.triu_indices(q, 0 if include_diagonal else 1)
    return mad_curves(fitted[:, iu[0], iu[1]], truth[:, iu[0], iu[1]])


# ---------------------------------------------------------------------------
# WAIC


def waic(loglik) -> WaicResult:
    """WAIC from an ``(S, n_obs)`` matrix of pointwise log-likelihood draws.

    ``p_waic`` uses the sample variance (``ddof=1``) of each column.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValidationError("need an (S, n_obs) matrix with S >= 2")
    if not np.all(np.isfinite(ll)):
        raise ValidationError("non-finite log-likelihood draws")
    S = ll.shape[0]
    lppd = float(np.sum(logsumexp(ll, axis=0) - math.log(S)))
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1)))
    return WaicResult(lppd, p_waic, -2.0 * (lppd - p_waic))


# ---------------------------------------------------------------------------
# convergence


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise ValidationError("chains must be (n_chains, n_draws)")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row, via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m, axis=1)
    return np.fft.irfft(f * np.conj(f), m, axis=1)[:, :n] / n


def _ess_raw(x: np.ndarray) -> float:
    """ESS of ``(m, n)`` chains with Geyer's initial monotone sequence truncation."""
    m, n = x.shape
    acov = _autocov(x)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = np.zeros(n)
    rho[0] = 1.0
    even = 1.0
    odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = odd
    t = 1
    while t < n - 3 and even + odd > 0:
        even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if even + odd >= 0:
            rho[t + 1], rho[t + 2] = even, odd
        t += 2
    max_t = t - 2
    if even > 0:
        rho[max_t + 1] = even
    # enforce a monotone sequence of paired sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = 0.5 * (rho[t - 1] + rho[t])
        t += 2
    tau = -1.0 + 2.0 * rho[:max_t].sum() + rho[max_t]
    ess = m * n
    return float(ess / max(tau, 1.0 / math.log10(ess)))


def _constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x.flat[0]))


def bulk_ess(chains, with_flag: bool = False):
    """Rank-normalized bulk effective sample size of ``(n_chains, n_draws)`` draws.

    A constant input has no defined ESS: the result is NaN (flag ``"constant"``).
    """
    x = _as_chains(chains)
    if x.shape[1] < 4:
        raise ValidationError("need at least 4 draws per chain")
    if _constant(x):
        logger.warning("constant chain: ESS undefined")
        return Diagnostic(math.nan, "constant") if with_flag else math.nan
    val = _ess_raw(_rank_normalize(_split(x)))
    return Diagnostic(val, "") if with_flag else val


def rhat(chains, with_flag: bool = False):
    """Rank-normalized split R-hat of ``(n_chains, n_draws)`` draws (one chain is split in half)."""
    x = _as_chains(chains)
    if x.shape[1] < 4:
        raise ValidationError("need at least 4 draws per chain")
    if _constant(x):
        logger.warning("constant chains: R-hat undefined")
        return Diagnostic(math.nan, "constant") if with_flag else math.nan
    z = _rank_normalize(_split(x))
    n = z.shape[1]
    W = z.var(axis=1, ddof=1).mean()
    B = n * z.mean(axis=1).var(ddof=1)
    val = float(math.sqrt(((n - 1) / n * W + B / n) / W))
    return Diagnostic(val, "") if with_flag else val


def curve_convergence(store: DrawsStore, h_microns=None) -> list[tuple[str, int, int, float, float]]:
    """ESS and R-hat of the scalar chains ``rho_rs(h)`` at every pair and distance.

    Rows are ``(quantity, r, s, h_microns, value)``. Degenerate draws make a chain
    unusable, so the diagnostics are computed on per-chain curves.
    """
    h = default_h_microns(store) if h_microns is None else np.asarray(h_microns, dtype=float)
    S = min(c.n_draws for c in store.chains)
    per_chain = []
    for c in store.chains:
        one = DrawsStore([type(c)(A=c.A[:S], B=c.B[:S], alpha=c.alpha[:S], phi=c.phi[:S],
                                  iterations=c.iterations[:S])], store.meta)
        vals, n_bad = curve_draws(one, h)
        if n_bad:
            raise DegenerateLoadingsError("degenerate draws prevent per-chain curve diagnostics")
        per_chain.append(vals)
    x = np.stack(per_chain)  # (chains, S, h, q, q)
    rows = []
    for r, s in pairs(x.shape[-1]):
        for i, hm in enumerate(h):
            ch = x[:, :, i, r, s]
            if _constant(ch):  # e.g. a marginal curve at h = 0
                rows.append(("ess_bulk", r, s, float(hm), math.nan))
                rows.append(("rhat", r, s, float(hm), math.nan))
                continue
            rows.append(("ess_bulk", r, s, float(hm), bulk_ess(ch)))
            rows.append(("rhat", r, s, float(hm), rhat(ch)))
    return rows


# ---------------------------------------------------------------------------
# output


def _header(fh, meta: dict):
    for key in ("seed", "config_hash"):
        if key in meta:
            fh.write(f"# {key}={meta[key]}\n")


def write_curves(curves: Sequence[CorrelationCurve], path: str | Path, meta: dict | None = None):
    with open(path, "w", newline="") as fh:
        _header(fh, meta or {})
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_r", "pair_s", "h_microns", "mean", "lo95", "hi95"])
        for c in curves:
            for i, h in enumerate(c.h_microns):
                w.writerow([c.pair[0], c.pair[1], repr(float(h)), repr(float(c.mean[i])),
                            repr(float(c.lo95[i])), repr(float(c.hi95[i]))])


def read_curves(path: str | Path) -> list[CorrelationCurve]:
    rows: dict[tuple[int, int], list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            key = (int(rec["pair_r"]), int(rec["pair_s"]))
            rows.setdefault(key, []).append(
                [float(rec[c]) for c in ("h_microns", "mean", "lo95", "hi95")])
    out = []
    for key, vals in rows.items():
        a = np.array(vals)
        out.append(CorrelationCurve(key, a[:, 0], a[:, 1], a[:, 2], a[:, 3]))
    return out


def write_diagnostics(rows, path: str | Path, meta: dict | None = None):
    with open(path, "w", newline="") as fh:
        _header(fh, meta or {})
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "pair_r", "pair_s", "h_microns", "value"])
        for q, r, s, h, v in rows:
            w.writerow([q, "" if r is None else r, "" if s is None else s,
                        "" if h is None else repr(float(h)), repr(float(v))])


def write_waic(result: WaicResult, path: str | Path, meta: dict | None = None):
    payload = result.to_dict()
    for key in ("seed", "config_hash", "k"):
        if meta and key in meta:
            payload[key] = meta[key]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
