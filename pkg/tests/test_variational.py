import numpy as np
import pytest

from kolmo.likelihood import TrainConfig
from kolmo.odeint import SolveConfig
from kolmo.simulate import preset, sample_paths
from kolmo.statespace import normalize_covariates
from kolmo.variational import (VariationalModel, bands_from_draws, build_variational, elbo, elbo_loss,
                               export_latent, fit_variational, kl_diag_gauss, kmeans, predict_interval)


def test_kl_known_values():
    assert kl_diag_gauss([2.0], [0.0], [0.0], [0.0]) == pytest.approx(2.0)
    assert kl_diag_gauss([0.0], [1.0], [0.0], [0.0]) == pytest.approx(0.5 * (np.e - 2))
    assert kl_diag_gauss([0.3, 1.0], [0.2, -0.5], [0.3, 1.0], [0.2, -0.5]) == 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mq, lq, mp, lp = 0.4, -0.3, -0.2, 0.5
    z = mq + np.exp(0.5 * lq) * rng.standard_normal(400_000)

    def logpdf(z, m, lv):
        return -0.5 * (np.log(2 * np.pi) + lv + (z - m) ** 2 / np.exp(lv))

    mc = np.mean(logpdf(z, mq, lq) - logpdf(z, mp, lp))
    assert kl_diag_gauss([mq], [lq], [mp], [lp]) == pytest.approx(mc, abs=5e-3)


def _model(ds, seed=3):
    m = VariationalModel(ds.topology, ds.n_covariates, n_latent=2, encoder_layers=(5,), dynamics_layers=(6,),
                         time_scale=0.1, beta=0.7, seed=seed)
    m.params.data[:] += np.random.default_rng(0).normal(0, 0.3, m.params.size)
    return m


def test_elbo_gradient_matches_finite_differences():
    ds = sample_paths(preset("dominant-binary"), n=5, seed=1)
    m = _model(ds)
    cfg = SolveConfig(method="rk4", step_count=6)
    eps = np.random.default_rng(5).standard_normal((5, 2))
    rng = np.random.default_rng(0)
    m.params.zero_grad()
    elbo_loss(m, ds.subjects, cfg, rng, mu=0.05, need_grad=True, eps=eps)
    g = m.params.grad.copy()
    h = 1e-6
    for i in np.random.default_rng(1).choice(m.params.size, 25, replace=False):
        v = m.params.data[i]
        m.params.data[i] = v + h
        a = elbo_loss(m, ds.subjects, cfg, rng, mu=0.05, eps=eps).total
        m.params.data[i] = v - h
        b = elbo_loss(m, ds.subjects, cfg, rng, mu=0.05, eps=eps).total
        m.params.data[i] = v
        fd = (a - b) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), 1e-3)


def test_elbo_is_deterministic_given_noise():
    ds = sample_paths(preset("dominant-binary"), n=3, seed=2)
    m = _model(ds)
    eps = np.zeros((1, 2))
    assert elbo(m, ds.subjects[0], eps=eps) == elbo(m, ds.subjects[0], eps=eps)


def test_predict_interval_bands_are_ordered_and_reproducible():
    ds = sample_paths(preset("dominant-binary"), n=4, seed=2)
    m = _model(ds)
    x = ds.covariate_matrix()[:2]
    a = predict_interval(m, x, np.linspace(0, 5, 4), n_samples=20, seed=9)
    b = predict_interval(m, x, np.linspace(0, 5, 4), n_samples=20, seed=9)
    assert np.array_equal(a.lo, b.lo) and np.array_equal(a.hi, b.hi)
    assert np.all(a.lo <= a.mean + 1e-12) and np.all(a.mean <= a.hi + 1e-12)
    assert np.allclose(a.mean.sum(-1), 1.0, atol=1e-8)
    assert a.n_draws == 20 and a.n_dropped == 0
    with pytest.raises(ValueError):
        predict_interval(m, x, [1.0], n_samples=1)
    lo, hi = bands_from_draws(np.arange(101.0)[:, None], 0.9)
    assert lo[0] == pytest.approx(5.0) and hi[0] == pytest.approx(95.0)


def test_kmeans_separates_blobs_and_canonicalizes():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(5, 0.1, (30, 2)), rng.normal(0, 0.1, (50, 2))])
    labels, centers = kmeans(X, 2)
    assert np.all(labels[30:] == 0) and np.all(labels[:30] == 1)
    assert np.allclose(centers[0], 0, atol=0.1)
    perm = rng.permutation(80)
    l2, _ = kmeans(X[perm], 2, seed=4)
    assert np.array_equal(l2, labels[perm])
    with pytest.raises(ValueError):
        kmeans(X, 100)


def test_short_variational_fit_and_export():
    sp = preset("dominant-binary")
    ds = sample_paths(sp, n=150)
    train, st = normalize_covariates(ds.subset(range(110)))
    valid, _ = normalize_covariates(ds.subset(range(110, 150)), st)
    cfg = TrainConfig(encoder_layers=1, encoder_width=8, dynamics_layers=1, dynamics_width=8, n_memory=2,
                      lr=3e-3, batch_size=32, max_epochs=3, rk4_steps=8)
    m = build_variational(cfg, train, beta=0.5)
    res = fit_variational(m, train, valid, cfg)
    assert len(res.history) == 3 and np.isfinite(res.best_valid)
    exp = export_latent(m, valid, k=2)
    assert exp.means.shape == (40, 2) and set(exp.labels) <= {0, 1}
    assert m.architecture()["kind"] == "variational"
