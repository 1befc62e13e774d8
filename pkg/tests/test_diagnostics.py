import math

import numpy as np
import pytest

from meshlgcp.diagnostics import (aggregate_mad, all_xcorr_summaries, bulk_ess, curve_convergence, diff_curves,
                                  mad_curves, read_curves, rhat, waic, write_curves, xcorr_summary)
from meshlgcp.draws import ChainDraws, DrawsStore
from meshlgcp.kernel import all_cross_corr
from meshlgcp.preprocess import GridSpec, ValidationError


def _store(A, phi, labels=("a", "b", "c"), grid=GridSpec(4, 4, scale=100.0)):
    A = np.asarray(A, float)
    phi = np.asarray(phi, float)
    S = A.shape[0]
    ch = ChainDraws(A=A, B=np.zeros((S, 0, A.shape[1])), alpha=np.zeros((S, 1, A.shape[1])), phi=phi,
                    iterations=np.arange(S))
    return DrawsStore([ch], {"labels": list(labels), "grid": grid.to_dict(), "k": A.shape[2],
                             "n_subjects": 1, "p": 0, "seed": 0, "config_hash": "x"})


def test_waic_hand_arithmetic():
    ll = np.log(np.array([[0.5, 0.2], [0.5, 0.4]]))
    w = waic(ll)
    lppd = math.log(0.5) + math.log(0.3)
    p = math.log(2.0) ** 2 / 2
    assert w.lppd == pytest.approx(lppd, abs=1e-12)
    assert w.p_waic == pytest.approx(p, abs=1e-12)
    assert w.waic == pytest.approx(-2 * (lppd - p), abs=1e-12)


def test_waic_constant_draws_have_zero_penalty():
    w = waic(np.full((10, 3), -1.5))
    assert w.p_waic == 0.0 and w.lppd == pytest.approx(-4.5)


def test_waic_validation():
    with pytest.raises(ValidationError):
        waic(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        waic(np.array([[0.0, -np.inf], [0.0, 0.0]]))


def test_ess_and_rhat_iid():
    x = np.random.default_rng(0).normal(size=(4, 1000))
    assert 0.8 * 4000 <= bulk_ess(x) <= 1.2 * 4000
    assert 0.999 <= rhat(x) <= 1.01


def test_ess_ar1():
    rng = np.random.default_rng(1)
    n, rho = 20000, 0.9
    x = np.zeros(n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + rng.normal()
    theory = n * (1 - rho) / (1 + rho)
    assert theory / 1.5 <= bulk_ess(x) <= theory * 1.5


def test_rhat_detects_shifted_chains():
    x = np.random.default_rng(2).normal(size=(4, 500))
    x[0] += 3
    assert rhat(x) > 1.1


def test_constant_chain_flagged():
    d = bulk_ess(np.ones((2, 10)), with_flag=True)
    assert math.isnan(d.value) and d.flag == "constant"
    assert math.isnan(rhat(np.ones((2, 10))))


def test_too_few_draws():
    with pytest.raises(ValidationError):
        bulk_ess(np.zeros((1, 3)))


def test_mad_hand_values():
    assert mad_curves([0.1, 0.2, 0.9], [0.0, 0.0, 0.0]) == pytest.approx(0.2)
    with pytest.raises(ValidationError):
        mad_curves([0.1], [0.1, 0.2])
    c = np.zeros((3, 2, 2))
    t = np.zeros((3, 2, 2))
    t[:, 0, 1] = 0.5
    assert aggregate_mad(c, t) == pytest.approx(0.5)
    assert aggregate_mad(c, t, include_diagonal=True) == 0.0


def test_xcorr_summary_constant_draws():
    A = np.array([[[0.8, 0.0], [0.3, 0.6], [-0.4, 0.2]]] * 5)
    phi = np.array([[1.0, 3.0]] * 5)
    store = _store(A, phi)
    h = np.array([0.0, 25.0, 50.0])
    cur = xcorr_summary(store, (0, 2), h)
    ref = all_cross_corr(A[0], phi[0], h / 100.0)[:, 0, 2]
    np.testing.assert_allclose(cur.mean, ref, atol=1e-14)
    np.testing.assert_allclose(cur.lo95, ref, atol=1e-14)
    assert cur.n_draws == 5
    diag = xcorr_summary(store, (1, 1), h)
    assert diag.mean[0] == 1.0


def test_xcorr_band_contains_mean_and_invariance():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(50, 3, 2))
    phi = rng.uniform(0.5, 4, size=(50, 2))
    a = all_xcorr_summaries(_store(A, phi))
    b = all_xcorr_summaries(_store(-A[:, :, ::-1], phi[:, ::-1]))
    assert len(a) == 6
    for x, y in zip(a, b):
        assert np.all(x.lo95 <= x.mean) and np.all(x.mean <= x.hi95)
        np.testing.assert_allclose(x.mean, y.mean, atol=1e-14)


def test_degenerate_draws_excluded():
    A = np.array([[[0.8, 0.0], [0.3, 0.6], [-0.4, 0.2]]] * 4)
    A[1, 2] = 0.0
    cur = xcorr_summary(_store(A, np.ones((4, 2))), (0, 1), [0.0, 10.0])
    assert cur.n_draws == 3 and cur.n_excluded == 1


def test_diff_of_identical_stores_is_zero():
    rng = np.random.default_rng(4)
    st = _store(rng.normal(size=(20, 3, 2)), rng.uniform(0.5, 4, size=(20, 2)))
    d = diff_curves(st, st, (0, 1))
    np.testing.assert_array_equal(d.mean, 0.0)
    other = _store(rng.normal(size=(20, 3, 2)), np.ones((20, 2)), labels=("a", "b", "x"))
    with pytest.raises(ValidationError):
        diff_curves(st, other, (0, 1))


def test_curve_convergence_rows():
    rng = np.random.default_rng(5)
    st = _store(rng.normal(size=(40, 3, 2)), rng.uniform(0.5, 4, size=(40, 2)))
    rows = curve_convergence(st, [0.0, 30.0])
    assert len(rows) == 6 * 2 * 2
    diag0 = [r for r in rows if r[1] == r[2] and r[3] == 0.0]
    assert all(math.isnan(r[4]) for r in diag0)


def test_curves_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    st = _store(rng.normal(size=(10, 3, 2)), rng.uniform(0.5, 4, size=(10, 2)))
    curves = all_xcorr_summaries(st)
    write_curves(curves, tmp_path / "c.csv", {"seed": 1, "config_hash": "abc"})
    assert (tmp_path / "c.csv").read_text().startswith("# seed=1\n# config_hash=abc\n")
    back = read_curves(tmp_path / "c.csv")
    for a, b in zip(curves, back):
        assert a.pair == b.pair
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.h_microns, b.h_microns)
