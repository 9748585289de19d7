import numpy as np
import pytest
from scipy import stats

from kolmo.nonparam import aalen_johansen
from kolmo.simulate import (CovariateSpec, TransitionHazard, TrueHazardSpec, preset, presets,
                            sample_paths, saw, spec_from_dict, spec_to_dict, split_indices, true_occupation,
                            true_rates)
from kolmo.statespace import validate_dataset


def _exp_spec(**kw):
    base = dict(n_states=2, hazards=(TransitionHazard(0, 1, 1.0, 1.0),), covariates=(), horizon=60.0,
                censor_fraction=None, censor_rate=0.0, bound_step=1.0, n_subjects=10_000, seed=3)
    base.update(kw)
    return TrueHazardSpec(**base)


def test_constant_rate_event_times_are_exponential():
    ds = sample_paths(_exp_spec())
    t, e = ds.exit_data()
    assert e.all()
    se = t.std(ddof=1) / np.sqrt(t.size)
    assert abs(t.mean() - 1.0) < 3 * se
    assert stats.kstest(t, "expon").pvalue > 0.01


@pytest.mark.parametrize("name", sorted(presets()))
def test_presets_are_valid_and_reproducible(name):
    sp = preset(name)
    a = sample_paths(sp, n=200)
    b = sample_paths(sp, n=200)
    assert validate_dataset(a) == []
    assert all(np.array_equal(x.covariates, y.covariates) and x.observations == y.observations
               for x, y in zip(a.subjects, b.subjects))
    assert a.topology == sp.topology


def test_censoring_fraction_targets_preset():
    sp = preset("competing-risks-5000")
    _, e = sample_paths(sp).exit_data()
    assert abs((1 - e.mean()) - sp.censor_fraction) < 0.03


def test_weibull_rates_and_saw_tooth():
    sp = TrueHazardSpec(2, (TransitionHazard(0, 1, 2.0, 4.0, (1.0,)),), (CovariateSpec("a"),), horizon=8.0,
                        time_varying=(0,), saw_amplitude=0.5)
    assert sp.period == 2.0
    assert np.allclose(saw(sp, [0.0, 1.0, 2.0, 3.0]), [0.0, 0.25, 0.0, 0.25])
    t = np.array([1.0, 3.0])
    r = true_rates(sp, t, np.ones((2, 1)))[:, 0]
    base = (2 / 4) * (t / 4)
    assert np.allclose(r, base * np.exp(0.25))


def test_blocked_transition_never_fires():
    sp = TrueHazardSpec(3, (TransitionHazard(0, 1, 1.0, 2.0), TransitionHazard(0, 2, 1.0, np.inf)), (),
                        horizon=10.0, censor_fraction=None, censor_rate=0.0, n_subjects=500)
    ds = sample_paths(sp)
    assert all(s.final_state != 2 for s in ds.subjects)


def test_shape_below_one_rejected():
    with pytest.raises(ValueError):
        _exp_spec(hazards=(TransitionHazard(0, 1, 0.8, 1.0),))


def test_spec_round_trip():
    for sp in presets().values():
        assert spec_from_dict(spec_to_dict(sp)) == sp
    d = spec_to_dict(preset("two-state-smoke"))
    d["unknown"] = 1
    with pytest.raises((ValueError, TypeError)):
        spec_from_dict(d)


def test_oracle_matches_closed_form_and_aalen_johansen():
    sp = _exp_spec()
    grid = np.linspace(0, 3, 7)
    truth = true_occupation(sp, np.zeros((1, 0)), grid)
    assert np.allclose(truth.occupation[0, :, 0], np.exp(-grid), atol=1e-10)
    sp = preset("illness-death-5000")
    ds = sample_paths(sp, n=1500)
    grid = np.linspace(0, 6, 7)
    truth = true_occupation(sp, ds.covariate_matrix(), grid)
    assert np.allclose(truth.occupation.sum(-1), 1.0, atol=1e-12)
    pop = truth.occupation.mean(axis=0)
    aj = aalen_johansen(ds, grid)
    assert np.abs(pop - aj).max() < 0.05


def test_split_indices_partition():
    tr, va, te = split_indices(101, 5)
    allidx = np.sort(np.concatenate([tr, va, te]))
    assert np.array_equal(allidx, np.arange(101))
    assert abs(len(tr) - 0.64 * 101) < 1 and abs(len(va) - 0.16 * 101) < 1
    assert np.array_equal(split_indices(101, 5)[0], tr)
