import math

import numpy as np
import pytest

from meshlgcp.draws import write_store
from meshlgcp.likelihood import poisson_loglik
from meshlgcp.meshedgp import mgp_logdensity
from meshlgcp.preprocess import CountGrid, GridSpec, ValidationError
from meshlgcp.sampler import (ModelData, Sampler, SamplerConfig, conjugate_gaussian_update, mala_log_q,
                              mala_step, mala_step_fixed, row_target, run_chain)
from meshlgcp.simulate import SimConfig, simulate_dataset


def _small_data(seed=0, N=2, q=3, n=(4, 4)):
    grids, _ = simulate_dataset(SimConfig(q=q, k=2, N=N, n_x=n[0], n_y=n[1], alpha=0.0, seed=seed))
    return ModelData.from_grids(grids)


def _warm_sampler(data, k=2, iters=30, **kw):
    cfg = SamplerConfig(k=k, n_iter=200, n_burn=100, tile=(2, 2), warmup_latent=5, **kw)
    s = Sampler(data, cfg)
    for _ in range(iters):
        s.step()
    return s


# -- conjugate reference -------------------------------------------------------


def test_conjugate_scalar_hand_values():
    mu, Sigma = conjugate_gaussian_update([[1.0], [1.0]], [1.0, 3.0], [[1.0]], 1.0)
    assert Sigma[0, 0] == pytest.approx(1 / 3)
    assert mu[0] == pytest.approx(4 / 3)


def test_conjugate_vague_prior_is_least_squares():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(scale=0.1, size=50)
    mu, _ = conjugate_gaussian_update(X, y, 1e12 * np.eye(3), 0.1)
    np.testing.assert_allclose(mu, np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-8)


def test_conjugate_rejects_bad_noise():
    with pytest.raises(ValueError):
        conjugate_gaussian_update([[1.0]], [1.0], [[1.0]], 0.0)


def test_gaussian_row_target_mode_and_metric_match_conjugate():
    rng = np.random.default_rng(1)
    N, n, m = 2, 6, 3
    Z = rng.normal(size=(N, n, m))
    y = rng.normal(size=(N, n))
    mask = np.ones((N, n), dtype=bool)
    mu, Sigma = conjugate_gaussian_update(Z.reshape(-1, m), y.ravel(), 2.0 * np.eye(m), 0.5)
    lp, g, M, bad = row_target(mu[None], Z, y, np.zeros((N, n)), mask, 2.0, family="gaussian", noise_sd=0.5)
    np.testing.assert_allclose(g[0], 0.0, atol=1e-10)
    np.testing.assert_allclose(np.linalg.inv(M[0]), Sigma, rtol=1e-10)
    assert not bad[0]


# -- MALA kernels ----------------------------------------------------------------


def _gauss_target(P):
    def target(x):
        g = -x @ P
        lp = 0.5 * np.einsum("na,na->n", x, g)
        return lp, g, np.broadcast_to(P, x.shape[:1] + P.shape), np.zeros(len(x), dtype=bool)
    return target


def test_mala_zero_step_leaves_state_unchanged():
    x = np.array([[0.3, -1.0], [2.0, 0.1]])
    res = mala_step(x, _gauss_target(np.eye(2)), np.zeros(2), np.random.default_rng(0))
    np.testing.assert_array_equal(res.x, x)
    assert not res.accepted.any()


def test_mala_forward_density_matches_kernel_formula():
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    target = _gauss_target(P)
    x = np.array([[0.5, -0.2]])
    eps = np.array([0.7])
    res = mala_step(x, target, eps, np.random.default_rng(3))
    _, g, M, _ = target(x)
    assert res.log_q_fwd[0] == pytest.approx(mala_log_q(res.proposal, x, g, M, eps)[0], abs=1e-10)
    _, gp, Mp, _ = target(res.proposal)
    assert res.log_q_rev[0] == pytest.approx(mala_log_q(x, res.proposal, gp, Mp, eps)[0], abs=1e-10)


def test_mala_fixed_forward_density_matches_kernel_formula():
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    chol = np.linalg.cholesky(P)

    def target(x):
        g = -x @ P
        return 0.5 * np.einsum("na,na->n", x, g), g, np.zeros(len(x), dtype=bool)

    x = np.array([[0.5, -0.2], [1.0, 1.0]])
    eps = np.array([0.7, 0.3])
    res = mala_step_fixed(x, target, chol, eps, np.random.default_rng(4))
    for i in range(2):
        _, g, _ = target(x[i:i + 1])
        ref = mala_log_q(res.proposal[i:i + 1], x[i:i + 1], g, P[None], eps[i:i + 1])[0]
        const = np.log(np.diag(chol)).sum() - 2 * np.log(eps[i])
        assert res.log_q_fwd[i] == pytest.approx(ref - const, abs=1e-10)
        _, gp, _ = target(res.proposal[i:i + 1])
        ref = mala_log_q(x[i:i + 1], res.proposal[i:i + 1], gp, P[None], eps[i:i + 1])[0]
        assert res.log_q_rev[i] == pytest.approx(ref - const, abs=1e-10)


def test_mala_samples_gaussian_target():
    P = np.array([[1.0, 0.6], [0.6, 2.0]])
    target = _gauss_target(P)
    rng = np.random.default_rng(5)
    x = np.zeros((200, 2))
    draws = []
    for t in range(400):
        x = mala_step(x, target, np.full(200, 1.2), rng).x
        if t >= 100:
            draws.append(x)
    d = np.concatenate(draws)
    np.testing.assert_allclose(np.cov(d.T), np.linalg.inv(P), atol=0.05)
    np.testing.assert_allclose(d.mean(0), 0.0, atol=0.03)


# -- full conditionals -------------------------------------------------------------


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_latent_block_target_gradient_and_joint_consistency():
    data = _small_data()
    s = _warm_sampler(data)
    st = s.state
    for blk in range(s.M):
        target, chol = s.latent_block_target(blk)
        b = s.mesh.blocks[blk]
        x0 = st.v[:, b, :].reshape(data.N, -1)
        lp, g, bad = target(x0)
        assert not bad.any()

        def lp0(x):
            full = x0.copy()
            full[0] = x
            return target(full)[0][0]

        fd = _fd_grad(lp0, x0[0])
        np.testing.assert_allclose(g[0], fd, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(chol @ chol.T, (chol @ chol.T).T)

        # differences of the conditional equal differences of the joint log density
        x1 = x0 + np.random.default_rng(blk).normal(scale=0.2, size=x0.shape)

        def joint(x):
            v = st.v.copy()
            v[:, b, :] = x.reshape(data.N, b.size, -1)
            prior = sum(mgp_logdensity(v[:, :, r], st.factors[r], s.mesh).sum() for r in range(2))
            return prior + poisson_loglik(data.y, s._W(st.params, v), data.mask)

        lp1 = target(x1)[0]
        assert lp1.sum() - lp.sum() == pytest.approx(joint(x1) - joint(x0), abs=1e-8)


def test_intercept_and_row_gradients_finite_differences():
    data = _small_data(seed=1)
    s = _warm_sampler(data)
    target = s.intercept_target()
    a0 = s.state.params.alpha.copy()
    _, g, M, _ = target(a0)
    for i in range(data.N):
        def f(a, i=i):
            full = a0.copy()
            full[i] = a
            return target(full)[0][i]
        np.testing.assert_allclose(g[i], _fd_grad(f, a0[i]), rtol=1e-5, atol=1e-6)
    assert np.all(np.linalg.eigvalsh(M) > 0)

    rng = np.random.default_rng(2)
    Z = rng.normal(size=(2, 5, 3))
    y = rng.poisson(1.0, size=(2, 5)).astype(float)
    off = rng.normal(size=(2, 5)) * 0.3
    mask = rng.random((2, 5)) < 0.8
    F = rng.normal(size=3) * 0.3
    _, g, _, _ = row_target(F[None], Z, y, off, mask, 10.0)
    fd = _fd_grad(lambda x: row_target(x[None], Z, y, off, mask, 10.0)[0][0], F)
    np.testing.assert_allclose(g[0], fd, rtol=1e-5, atol=1e-6)


def test_phi_outside_support_rejected_and_identity_accepted():
    data = _small_data()
    s = _warm_sampler(data, iters=10)
    phi = s.state.params.phi.copy()
    acc, log_r = s.update_phi(0, phi_prop=12.0)
    assert not acc and log_r == -math.inf
    assert s.state.params.phi[0] == phi[0]
    acc, log_r = s.update_phi(0, phi_prop=float(phi[0]))
    assert acc and log_r == 0.0


def test_structural_zeros_of_loadings_preserved():
    data = _small_data(q=3)
    s = _warm_sampler(data, k=3, iters=40)
    A = s.state.params.A
    assert A[0, 1] == 0 and A[0, 2] == 0 and A[1, 2] == 0


def test_shift_and_scale_moves_leave_intensity_unchanged():
    data = _small_data(seed=3)
    s = _warm_sampler(data, iters=20)
    st = s.state
    W0 = s._W(st.params, st.v)
    c = s.update_shift(1)
    assert np.all(c != 0)
    np.testing.assert_allclose(s._W(st.params, st.v), W0, atol=1e-12)
    for _ in range(10):
        s.update_scale(0)
    np.testing.assert_allclose(s._W(st.params, st.v), W0, atol=1e-12)


def test_k_larger_than_q_rejected():
    data = _small_data(q=2)
    with pytest.raises(ValidationError):
        Sampler(data, SamplerConfig(k=3, n_iter=10, n_burn=5))


def test_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(n_iter=10, n_burn=10)
    with pytest.raises(ValidationError):
        SamplerConfig(init_phi=20.0)
    with pytest.raises(ValidationError):
        SamplerConfig(n_iter=100, n_burn=10, warmup_latent=20)


# -- driver ----------------------------------------------------------------------


def test_single_draw_bookkeeping():
    data = _small_data()
    store = run_chain(data, SamplerConfig(k=2, n_iter=2, n_burn=1, tile=(2, 2)))
    ch = store.chains[0]
    assert ch.n_draws == 1
    assert ch.iterations.tolist() == [1]
    assert ch.loglik.shape == (1, data.N * data.n_px)
    assert ch.A.shape == (1, 3, 2) and ch.phi.shape == (1, 2)


def test_thinning_keeps_every_other_draw():
    data = _small_data()
    store = run_chain(data, SamplerConfig(k=1, n_iter=10, n_burn=4, thin=2, tile=(2, 2)))
    assert store.chains[0].iterations.tolist() == [4, 6, 8]


def test_seed_determinism_and_thread_invariance(tmp_path):
    data = _small_data()
    cfg = dict(k=2, n_iter=30, n_burn=10, tile=(2, 2), seed=7)
    a = run_chain(data, SamplerConfig(**cfg))
    b = run_chain(data, SamplerConfig(**cfg, threads=3))
    c = run_chain(data, SamplerConfig(**{**cfg, "seed": 8}))
    for name in ("A", "alpha", "phi", "loglik"):
        np.testing.assert_array_equal(getattr(a.chains[0], name), getattr(b.chains[0], name))
    assert not np.array_equal(a.chains[0].A, c.chains[0].A)
    write_store(a, tmp_path / "a")
    write_store(b, tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_chains_differ():
    data = _small_data()
    store = run_chain(data, SamplerConfig(k=1, n_iter=20, n_burn=10, tile=(2, 2), n_chains=2))
    assert store.n_chains == 2
    assert not np.array_equal(store.chains[0].alpha, store.chains[1].alpha)


def test_intercept_only_posterior_moment():
    g = GridSpec(5, 5)
    y = np.random.default_rng(0).poisson(2.0, size=(25, 1))
    data = ModelData.from_grids([CountGrid("a", g, y, labels=("t",))])
    cfg = SamplerConfig(k=1, n_iter=6000, n_burn=1000, tile=(5, 5), update_loadings=False, update_phi=False,
                        update_latent=False, store_loglik=False)
    store = run_chain(data, cfg)
    lam = np.exp(store.chains[0].alpha[:, 0, 0])
    # flat prior on alpha => exp(alpha) ~ Gamma(sum y, rate n)
    assert lam.mean() == pytest.approx(y.sum() / 25, rel=0.03)
    assert lam.var() == pytest.approx(y.sum() / 25**2, rel=0.2)


# -- importance-sampling oracle ------------------------------------------------------
#
# Tiny problem: 2x2 grid, 1x1 tiles, two subjects, two types, one factor, unit prior
# variance, phi ~ U(0.5, 5). Reference moments from 4e6 prior draws reweighted by the
# likelihood (effective sample size ~2.5e4).

IS_COUNTS = [[[2, 0], [1, 1], [0, 0], [3, 1]], [[0, 1], [0, 0], [1, 2], [0, 0]]]
IS_PHI = 2.6799
IS_A2 = [0.6177, 0.6371]
IS_A0A1 = 0.2620
IS_ALPHA = [0.213, -0.581, -0.863, -0.297]


@pytest.mark.slow
def test_posterior_matches_importance_sampling_oracle():
    g = GridSpec(2, 2)
    y = np.array(IS_COUNTS)
    data = ModelData.from_grids([CountGrid(f"s{i}", g, y[i], labels=("a", "b")) for i in range(2)])
    n = 30000
    cfg = SamplerConfig(k=1, n_iter=n, n_burn=n // 10, tile=(1, 1), prior_var=1.0, phi_min=0.5, phi_max=5.0,
                        store_loglik=False)
    ch = run_chain(data, cfg).chains[0]
    A = ch.A[:, :, 0]
    assert ch.phi.mean() == pytest.approx(IS_PHI, abs=0.12)
    np.testing.assert_allclose((A**2).mean(0), IS_A2, atol=0.05)
    assert (A[:, 0] * A[:, 1]).mean() == pytest.approx(IS_A0A1, abs=0.04)
    np.testing.assert_allclose(ch.alpha.reshape(len(A), -1).mean(0), IS_ALPHA, atol=0.06)
