import numpy as np
import pytest

from kolmo import io
from kolmo.datasets import (load_metabric, make_metabric_standin, read_survival_csv, standin_path,
                            survival_dataset, write_survival_csv)
from kolmo.simulate import preset, sample_paths
from kolmo.statespace import SubjectRecord, Dataset, illness_death


def test_dataset_round_trip(tmp_path):
    ds = sample_paths(preset("illness-death-5000"), n=60)
    io.write_dataset(tmp_path, ds)
    back = io.read_dataset_dir(tmp_path)
    assert back.topology == ds.topology
    assert back.covariate_names == ds.covariate_names
    for a, b in zip(ds.subjects, back.subjects):
        assert a.observations == b.observations
        assert a.last_observed == b.last_observed and a.obs_mode == b.obs_mode
        assert np.array_equal(a.covariates, b.covariates)


def test_interval_rows_round_trip(tmp_path):
    subs = (SubjectRecord([1.5], [(0, 0), (1.0, 1), (2.5, 2)], True, obs_mode=("interval", "exact"), subject_id="a"),
            SubjectRecord([0.5], [(0, 0), (3.0, 0)], False, subject_id="b"))
    ds = Dataset(subs, illness_death(), ("age",))
    io.write_dataset(tmp_path, ds)
    text = (tmp_path / "events.csv").read_text()
    assert text.splitlines()[0] == "subject_id,time,state,kind"
    assert "a,1.0,2,interval_transition" in text and "b,3.0,1,censor" in text
    back = io.read_dataset_dir(tmp_path)
    assert back.subjects[0].obs_mode == ("interval", "exact")


def test_topology_json_shape(tmp_path):
    obj = io.topology_to_json(illness_death())
    assert obj["allowed"][0] == [None, 1, 1] and obj["allowed"][2] == [0, 0, None]
    assert io.topology_from_json(obj) == illness_death()
    with pytest.raises(ValueError):
        io.topology_from_json({"allowed": [[1, 1], [0, None]]})


def test_occupation_round_trip(tmp_path):
    occ = np.random.default_rng(0).random((3, 4, 2))
    grid = np.linspace(0, 1, 4)
    io.write_occupation(tmp_path / "o.csv", ["1", "2", "3"], grid, occ)
    ids, g, back = io.read_occupation(tmp_path / "o.csv")
    assert ids == ["1", "2", "3"] and np.array_equal(g, grid) and np.array_equal(back, occ)


def test_standin_regenerates_bundled_file(tmp_path):
    x, t, e = make_metabric_standin()
    write_survival_csv(tmp_path / "s.csv", x, t, e)
    assert (tmp_path / "s.csv").read_bytes() == standin_path().read_bytes()
    ds, label = load_metabric()
    assert label == "metabric-standin" and len(ds) == 1904 and ds.n_covariates == 9


def test_metabric_env_override(tmp_path, monkeypatch):
    (tmp_path / "m.csv").write_text("x0,duration,event\n1.0,0.0,1\n2.0,5.0,0\n")
    monkeypatch.setenv("KOLMO_METABRIC_CSV", str(tmp_path / "m.csv"))
    ds, label = load_metabric()
    assert label.startswith("metabric:") and len(ds) == 2
    # zero duration moved to half the smallest positive one
    assert ds.subjects[0].final_time == 2.5


def test_survival_csv_needs_columns(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_survival_csv(tmp_path / "bad.csv")
    with pytest.raises(ValueError):
        survival_dataset(np.zeros((2, 1)), [1.0], [True, False])
