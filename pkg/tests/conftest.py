import numpy as np
import pytest

from kolmo.statespace import SubjectRecord, competing_risks, illness_death, two_state
from kolmo.survnode import SurvNodeModel

TOPOLOGIES = {"two-state": two_state, "illness-death": illness_death, "competing-risks": competing_risks}


def small_model(topology, n_cov=3, n_memory=2, seed=0, time_scale=0.5, jitter=0.0):
    model = SurvNodeModel(topology, n_cov, n_memory=n_memory, encoder_layers=(6,), dynamics_layers=(8,),
                          time_scale=time_scale, seed=seed)
    if jitter:
        model.params.data[:] += np.random.default_rng(seed).normal(0.0, jitter, model.params.size)
    return model


def illness_death_subjects(n=5, n_cov=3, seed=0):
    """Mixed exact, interval and censored records on illness-death."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.normal(size=n_cov)
        t = np.sort(rng.uniform(0.2, 2.0, 3))
        kind = i % 5
        if kind == 0:
            out.append(SubjectRecord(x, [(0, 0), (t[0], 1), (t[1], 2)], True))
        elif kind == 1:
            out.append(SubjectRecord(x, [(0, 0), (t[1], 2)], True))
        elif kind == 2:
            out.append(SubjectRecord(x, [(0, 0), (t[0], 1), (t[2], 1)], False))
        elif kind == 3:
            out.append(SubjectRecord(x, [(0, 0), (t[0], 1), (t[1], 2)], True, obs_mode=("interval", "exact")))
        else:
            out.append(SubjectRecord(x, [(0, 0), (t[2], 0)], False))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
