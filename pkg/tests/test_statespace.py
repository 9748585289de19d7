import numpy as np
import pytest

from kolmo.statespace import (Dataset, SubjectRecord, TransitionTopology, competing_risks, illness_death,
                              normalize_covariates, two_state, validate_dataset)


def test_topology_edges_and_absorbing():
    topo = illness_death()
    src, dst = topo.edges
    assert list(zip(src, dst)) == [(0, 1), (0, 2), (1, 2)]
    assert topo.q_count == 3
    assert topo.absorbing == frozenset({2})
    assert topo.edge_index(1, 2) == 2
    with pytest.raises(KeyError):
        topo.edge_index(2, 0)


def test_topology_rejects_bad_masks():
    with pytest.raises(ValueError):
        TransitionTopology(np.eye(2, dtype=bool))
    with pytest.raises(ValueError):
        TransitionTopology(np.zeros((2, 3), dtype=bool))


def test_reachability_is_transitive():
    topo = TransitionTopology.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    assert topo.reachable[0, 3]
    assert not topo.reachable[3, 0]
    assert competing_risks(3).n_states == 4


def test_equality_and_hash():
    assert two_state() == two_state()
    assert hash(illness_death()) == hash(illness_death())
    assert two_state() != illness_death()


def test_subject_state_at_is_right_continuous():
    s = SubjectRecord([0.0], [(0, 0), (1.0, 1), (2.0, 2)], True)
    assert s.state_at(0.999) == 0
    assert s.state_at(1.0) == 1
    assert s.state_at(5.0) == 2
    assert s.final_time == 2.0 and s.final_state == 2
    assert s.obs_mode == ("exact", "exact")


def _ds(subjects, topo=None):
    return Dataset(tuple(subjects), topo or illness_death())


def test_validate_accepts_good_records():
    ds = _ds([SubjectRecord([1.0], [(0, 0), (1.0, 1), (2.0, 2)], True),
              SubjectRecord([1.0], [(0, 0), (3.0, 0)], False),
              SubjectRecord([1.0], [(0, 0), (1.0, 1), (2.0, 2)], True, obs_mode=("interval", "exact")),
              SubjectRecord([1.0], [(0, 0), (2.0, 2)], True, obs_mode=("interval",))])
    assert validate_dataset(ds) == []


@pytest.mark.parametrize("subject, rule", [
    (SubjectRecord([1.0], [(0, 0), (1.0, 1), (0.5, 2)], True), "non-increasing times"),
    (SubjectRecord([1.0], [(0, 1), (1.0, 0)], True), "transition not allowed"),
    (SubjectRecord([1.0], [(0, 2), (1.0, 1)], True), "left absorbing state"),
    (SubjectRecord([1.0], [(0, 0), (1.0, 7)], True), "state out of range"),
    (SubjectRecord([1.0, 2.0], [(0, 0), (1.0, 1)], True), "covariate dimension mismatch"),
    (SubjectRecord([np.nan], [(0, 0), (1.0, 1)], True), "non-finite covariate"),
    (SubjectRecord([1.0], [(0, 0)], True), "observed event without a transition"),
])
def test_validate_reports_violations(subject, rule):
    ds = Dataset((subject,), illness_death(), ("x0",))
    errors = validate_dataset(ds)
    assert errors and errors[0].startswith("subject 0: " + rule)


def test_normalize_uses_training_moments():
    rng = np.random.default_rng(0)
    subs = [SubjectRecord([rng.normal(3, 2), 5.0], [(0, 0), (1.0, 1)], True) for _ in range(50)]
    ds = Dataset(tuple(subs), two_state())
    norm, stats = normalize_covariates(ds)
    x = norm.covariate_matrix()
    assert np.allclose(x[:, 0].mean(), 0) and np.allclose(x[:, 0].std(), 1)
    assert stats.constant.tolist() == [False, True]
    assert np.all(x[:, 1] == 0)
    again, _ = normalize_covariates(ds, stats)
    assert np.array_equal(again.covariate_matrix(), x)


def test_exit_data_and_subset():
    ds = _ds([SubjectRecord([0.0], [(0, 0), (1.0, 1)], True), SubjectRecord([0.0], [(0, 0), (2.0, 0)], False)])
    t, e = ds.exit_data()
    assert t.tolist() == [1.0, 2.0] and e.tolist() == [True, False]
    assert len(ds.subset([1])) == 1 and ds.max_time() == 2.0
