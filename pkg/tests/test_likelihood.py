import numpy as np
import pytest

from kolmo.likelihood import (TrainConfig, batch_loss, build_model, dataset_nll, fit, lyapunov_loss, subject_nll)
from kolmo.odeint import SolveConfig
from kolmo.simulate import preset, sample_paths
from kolmo.statespace import SubjectRecord, illness_death, normalize_covariates, two_state
from kolmo.survnode import ConstantRateModel, hazard_rates

from conftest import illness_death_subjects, small_model


@pytest.mark.parametrize("t", [0.3, 1.0, 2.5])
@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_closed_form_nll(t, lam):
    for scale in (1.0, 0.25):
        model = ConstantRateModel(two_state(), [lam], time_scale=scale)
        event = SubjectRecord(np.zeros(0), [(0, 0), (t, 1)], True)
        cens = SubjectRecord(np.zeros(0), [(0, 0), (t, 0)], False)
        assert np.isclose(subject_nll(model, event), -np.log(lam * np.exp(-lam * t)), atol=1e-8)
        assert np.isclose(subject_nll(model, cens), lam * t, atol=1e-8)


def test_interval_term_is_transition_probability():
    lam = [0.4, 0.2, 0.7]
    model = ConstantRateModel(illness_death(), lam)
    subj = SubjectRecord(np.zeros(0), [(0, 0), (2.0, 1)], True, obs_mode=("interval",))
    a, b = 0.6, 0.7
    p01 = 0.4 / (a - b) * (np.exp(-b * 2) - np.exp(-a * 2))
    assert np.isclose(subject_nll(model, subj), -np.log(p01), atol=1e-8)


def test_lyapunov_term():
    m = np.array([[1.0, 2.0], [0.0, 0.0]])
    assert lyapunov_loss(m) == pytest.approx((5 / 2 + 0) / 2)
    assert lyapunov_loss(np.zeros((3, 0))) == 0.0


def test_gradient_matches_finite_differences():
    model = small_model(illness_death(), n_memory=2, jitter=0.3, seed=1)
    subjects = illness_death_subjects(5, seed=2)
    cfg = SolveConfig(method="rk4", step_size=1 / 8)
    mu = 0.3
    model.params.zero_grad()
    batch_loss(model, subjects, cfg, mu=mu, need_grad=True)
    g = model.params.grad.copy()
    h = 1e-6
    rng = np.random.default_rng(0)
    for i in rng.choice(model.params.size, 30, replace=False):
        v = model.params.data[i]
        model.params.data[i] = v + h
        a = batch_loss(model, subjects, cfg, mu=mu).total
        model.params.data[i] = v - h
        b = batch_loss(model, subjects, cfg, mu=mu).total
        model.params.data[i] = v
        fd = (a - b) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), 1e-3)


def test_clamped_logs_are_counted():
    model = ConstantRateModel(two_state(), [1e-20])
    res = batch_loss(model, [SubjectRecord(np.zeros(0), [(0, 0), (1.0, 1)], True)], SolveConfig())
    assert res.clamped == 1
    assert np.isfinite(res.nll) and res.nll == pytest.approx(-np.log(1e-12), rel=1e-6)


def test_config_validation_and_round_trip():
    cfg = TrainConfig(n_memory=3, lr=1e-3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(mu=-1)
    assert cfg.solve_config().step_size == 1 / 64


def _smoke(n=120, seed=3):
    sp = preset("two-state-smoke")
    ds = sample_paths(sp, n=n, seed=seed)
    tr, _ = normalize_covariates(ds.subset(range(0, n - 40)))
    va, _ = normalize_covariates(ds.subset(range(n - 40, n)))
    return tr, va


def test_rate_initialization_starts_near_crude_rate():
    train, _ = _smoke()
    cfg = TrainConfig(encoder_layers=1, encoder_width=4, dynamics_layers=1, dynamics_width=4, n_memory=2)
    model = build_model(cfg, train)
    rate = hazard_rates(model, np.zeros(2), [0.0])[0, 0, 1]
    times, events = train.exit_data()
    crude = events.sum() / times.sum()
    assert 0.3 * crude < rate < 3 * crude


def test_fit_is_deterministic_and_improves():
    train, valid = _smoke()
    cfg = TrainConfig(encoder_layers=1, encoder_width=4, dynamics_layers=1, dynamics_width=8, n_memory=2,
                      lr=5e-3, batch_size=32, max_epochs=4, patience=10, rk4_steps=8, seed=2)
    runs = []
    for _ in range(2):
        model = build_model(cfg, train)
        start = dataset_nll(model, valid, cfg.solve_config())[0]
        res = fit(model, train, valid, cfg)
        runs.append((model.params.copy(), res.history))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert [r["valid_nll"] for r in runs[0][1]] == [r["valid_nll"] for r in runs[1][1]]
    assert len(runs[0][1]) == 4
    assert min(r["valid_nll"] for r in runs[0][1]) <= start + 1e-9
    assert set(runs[0][1][0]) == {"epoch", "train_nll", "valid_nll", "lyapunov", "clamp_count"}


def test_early_stopping_restores_best():
    train, valid = _smoke()
    cfg = TrainConfig(encoder_layers=1, encoder_width=4, dynamics_layers=1, dynamics_width=4, n_memory=2,
                      lr=0.5, batch_size=16, max_epochs=30, patience=2, rk4_steps=4)
    model = build_model(cfg, train)
    res = fit(model, train, valid, cfg)
    assert len(res.history) <= 30
    assert dataset_nll(model, valid, cfg.solve_config())[0] == pytest.approx(res.best_valid, rel=1e-10)
