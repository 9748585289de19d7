import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from kolmo import kernels
from kolmo.datasets import survival_dataset
from kolmo.metrics import (EvalGrid, SurvivalCurves, brier_ipcw, brier_vs_truth, concordance_td, ibll,
                           interval_coverage, multistate_brier, quantile_grid, time_average, uniform_grid)
from kolmo.nonparam import censoring_km


def _naive_concordance(S_at, times, events):
    """Antolini pairs by brute force; S_at(i, t) is subject i's survival at t."""
    conc = comp = 0.0
    for i in range(len(times)):
        if not events[i]:
            continue
        for j in range(len(times)):
            if times[j] > times[i]:
                comp += 1
                a, b = S_at(i, times[i]), S_at(j, times[i])
                conc += 1.0 if a < b else (0.5 if a == b else 0.0)
    return conc / comp


def test_concordance_matches_bruteforce(rng):
    n = 40
    times = rng.exponential(size=n)
    events = rng.random(n) < 0.7
    grid = np.linspace(0, times.max(), 25)
    vals = np.exp(-np.outer(rng.random(n) + 0.2, grid))
    curves = SurvivalCurves(grid, vals)
    ref = _naive_concordance(lambda i, t: curves.at([t])[i, 0], times, events)
    assert concordance_td(curves, times, events) == pytest.approx(ref, abs=1e-12)


def test_concordance_perfect_and_reversed():
    times = np.arange(1.0, 6.0)
    events = np.ones(5, bool)
    grid = np.linspace(0, 6, 13)
    good = SurvivalCurves(grid, np.exp(-np.outer(1 / times, grid)))
    bad = SurvivalCurves(grid, np.exp(-np.outer(times, grid)))
    assert concordance_td(good, times, events) == 1.0
    assert concordance_td(bad, times, events) == 0.0


def test_kernel_backends_agree(rng):
    surv = rng.random((30, 50))
    subj = rng.choice(50, 30, replace=False)
    times = rng.random(50)
    kernels.use_backend("python")
    a = kernels.concordance_counts(surv, subj, times)
    try:
        kernels.use_backend("cython")
    except ImportError:
        pytest.skip("compiled extension not built")
    b = kernels.concordance_counts(surv, subj, times)
    assert a == b


def test_brier_without_censoring_is_unweighted(rng):
    n = 60
    times = rng.exponential(size=n)
    events = np.ones(n, bool)
    grid = quantile_grid(times, events, 20)
    pred = rng.random((n, grid.count))
    ref = np.mean((pred - (times[:, None] > grid.times[None, :])) ** 2, axis=0)
    res = brier_ipcw(pred, times, events, None, grid)
    assert np.array_equal(res.curve, ref) or np.allclose(res.curve, ref, rtol=0, atol=1e-15)
    assert res.n_capped == 0


def test_graf_weights_reference(rng):
    n = 30
    times = np.round(rng.exponential(size=n), 2) + 0.01
    events = rng.random(n) < 0.6
    grid = uniform_grid(0.05, np.quantile(times, 0.8), 10)
    pred = rng.random((n, 10))
    G = censoring_km(times, events)
    ref = []
    for k, t in enumerate(grid.times):
        tot = 0.0
        for i in range(n):
            if times[i] <= t and events[i]:
                tot += pred[i, k] ** 2 / max(G.left(times[i]), 1e-3)
            elif times[i] > t:
                tot += (1 - pred[i, k]) ** 2 / max(G(t), 1e-3)
        ref.append(tot / n)
    res = brier_ipcw(pred, times, events, G, grid)
    assert np.allclose(res.curve, ref, atol=1e-14)
    assert res.integrated == pytest.approx(trapezoid(ref, grid.times) / (grid.times[-1] - grid.times[0]))


def test_ibll_is_negative_and_perfect_prediction_is_near_zero(rng):
    n = 50
    times = rng.exponential(size=n) + 0.01
    events = np.ones(n, bool)
    grid = quantile_grid(times, events, 10)
    truth = (times[:, None] > grid.times[None, :]).astype(float)
    assert ibll(truth, times, events, None, grid).integrated > -1e-6
    assert ibll(np.full_like(truth, 0.5), times, events, None, grid).integrated == pytest.approx(np.log(0.5))


def test_constant_half_gives_quarter():
    times = np.linspace(0.1, 3, 40)
    events = np.arange(40) % 3 != 0
    grid = quantile_grid(times, events, 15)
    res = brier_ipcw(np.full((40, grid.count), 0.5), times, events, censoring_km(times, events), grid)
    surviving = res.curve
    assert np.all(surviving <= 0.25 * 100 + 1e-12)


def test_multistate_reduces_to_survival_brier(rng):
    n = 50
    times = rng.exponential(size=n) + 0.01
    events = rng.random(n) < 0.7
    ds = survival_dataset(np.zeros((n, 1)), times, events)
    grid = quantile_grid(times, events, 12)
    S = rng.random((n, grid.count))
    occ = np.stack([S, 1 - S], axis=-1)
    G = censoring_km(times, events)
    ms = multistate_brier(occ, ds, G, grid)
    bs = brier_ipcw(S, times, events, G, grid)
    assert np.allclose(ms.curve[:, 0], bs.curve, atol=1e-14)
    assert np.allclose(ms.curve[:, 1], bs.curve, atol=1e-14)


def test_quantile_grid_excludes_tails():
    times = np.arange(1, 1001, dtype=float)
    grid = quantile_grid(times, np.ones(1000, bool), 100)
    assert grid.count == 100 and grid.rule == "quantile"
    assert grid.times[0] > 1 and grid.times[-1] < 1000
    with pytest.raises(ValueError):
        quantile_grid(times, np.zeros(1000, bool))
    with pytest.raises(ValueError):
        EvalGrid([1.0, 1.0], "uniform", 2)


@given(st.integers(2, 10))
@settings(max_examples=10, deadline=None)
def test_time_average_of_constant(k):
    grid = np.linspace(0, 5, k)
    assert np.allclose(time_average(grid, np.full((k, 3), 0.2)), 0.2)


def test_truth_metrics():
    p = np.random.default_rng(0).random((4, 5, 3))
    assert np.all(brier_vs_truth(p, p) == 0)
    assert interval_coverage(p - 0.1, p + 0.1, p) == 1.0
    assert interval_coverage(p + 0.1, p + 0.2, p) == 0.0
    with pytest.raises(ValueError):
        brier_vs_truth(p, p[:2])
    with pytest.raises(ValueError):
        interval_coverage(p, p, p, grid=np.arange(5.0), truth_grid=np.arange(1.0, 6.0))


def test_curves_interpolate_and_hold():
    c = SurvivalCurves([0.0, 1.0], [[1.0, 0.0]])
    assert np.allclose(c.at([-1.0, 0.25, 2.0]), [[1.0, 0.75, 0.0]])
