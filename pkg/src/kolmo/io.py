"""CSV/JSON file formats.

All files are UTF-8 with LF line endings and ``.`` decimals. States are
1-indexed on disk. Floats are written with ``repr`` so values round-trip
exactly and reruns are byte-identical.

events.csv
    ``subject_id,time,state,kind`` with kind one of ``start``,
    ``transition``, ``interval_transition``, ``censor``. A subject's rows are
    time ordered; the first is ``start``. A final ``transition`` row means
    the last event was observed; a final ``censor`` row means it was not.
covariates.csv
    ``subject_id,<name>...``; its row order fixes the subject order.
topology.json
    ``{"allowed": [[null, 1, ...], ...]}``: 0/1 off the diagonal, null on it.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .statespace import EXACT, INTERVAL, Dataset, SubjectRecord, TransitionTopology

KINDS = ("start", "transition", "interval_transition", "censor")


def fmt(v: float) -> str:
    return repr(float(v))


def _open_w(path):
    return open(path, "w", encoding="utf-8", newline="\n")


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


# ---------------------------------------------------------------- topology

def topology_to_json(topo: TransitionTopology) -> dict:
    S = topo.n_states
    mat = [[None if i == j else int(topo.allowed[i, j]) for j in range(S)] for i in range(S)]
    return {"allowed": mat}


def write_topology(path, topo: TransitionTopology):
    with _open_w(path) as fh:
        json.dump(topology_to_json(topo), fh, indent=1)
        fh.write("\n")


def topology_from_json(obj) -> TransitionTopology:
    mat = obj["allowed"] if isinstance(obj, dict) else obj
    S = len(mat)
    allowed = np.zeros((S, S), dtype=bool)
    for i, row in enumerate(mat):
        if len(row) != S:
            raise ValueError("topology matrix must be square")
        for j, v in enumerate(row):
            if i == j:
                if v not in (None, 0):
                    raise ValueError("topology diagonal must be null")
                continue
            if v is None or (isinstance(v, float) and np.isnan(v)):
                v = 0
            if v not in (0, 1):
                raise ValueError(f"topology entry ({i + 1},{j + 1}) must be 0 or 1")
            allowed[i, j] = bool(v)
    return TransitionTopology(allowed)


def read_topology(path) -> TransitionTopology:
    with open(path, encoding="utf-8") as fh:
        return topology_from_json(json.load(fh))


# ---------------------------------------------------------------- events and covariates

def write_dataset(out_dir, ds: Dataset, prefix: str = ""):
    """Write ``events.csv``, ``covariates.csv`` and ``topology.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _open_w(out / f"{prefix}events.csv") as fh:
        w = _writer(fh)
        w.writerow(["subject_id", "time", "state", "kind"])
        for i, subj in enumerate(ds.subjects):
            sid = subj.subject_id or str(i + 1)
            obs = subj.observations
            w.writerow([sid, fmt(obs[0][0]), obs[0][1] + 1, "start"])
            for j in range(1, len(obs)):
                t, s = obs[j]
                if j == len(obs) - 1 and not subj.last_observed:
                    kind = "censor"
                else:
                    kind = "interval_transition" if subj.obs_mode[j - 1] == INTERVAL else "transition"
                w.writerow([sid, fmt(t), s + 1, kind])
    with _open_w(out / f"{prefix}covariates.csv") as fh:
        w = _writer(fh)
        w.writerow(["subject_id", *ds.covariate_names])
        for i, subj in enumerate(ds.subjects):
            w.writerow([subj.subject_id or str(i + 1), *(fmt(v) for v in subj.covariates)])
    write_topology(out / f"{prefix}topology.json", ds.topology)


def read_dataset(events_path, covariates_path, topology_path) -> Dataset:
    topo = read_topology(topology_path)
    with open(covariates_path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "subject_id":
        raise ValueError(f"{covariates_path}: header must start with subject_id")
    names = tuple(rows[0][1:])
    cov = {}
    order = []
    for r in rows[1:]:
        if not r:
            continue
        if r[0] in cov:
            raise ValueError(f"{covariates_path}: duplicate subject {r[0]}")
        cov[r[0]] = np.array([float(v) for v in r[1:]])
        order.append(r[0])
    events: dict[str, list] = {}
    with open(events_path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["subject_id", "time", "state", "kind"]:
            raise ValueError(f"{events_path}: header must be subject_id,time,state,kind")
        for r in reader:
            if r["kind"] not in KINDS:
                raise ValueError(f"{events_path}: unknown kind {r['kind']!r}")
            events.setdefault(r["subject_id"], []).append((float(r["time"]), int(r["state"]) - 1, r["kind"]))
    missing = set(events) - set(cov)
    if missing:
        raise ValueError(f"subjects without covariates: {sorted(missing)[:5]}")
    subjects = []
    for sid in order:
        rows_s = events.get(sid)
        if not rows_s:
            raise ValueError(f"subject {sid} has no events")
        if rows_s[0][2] != "start":
            raise ValueError(f"subject {sid}: first row must be a start row")
        obs = [(t, s) for t, s, _ in rows_s]
        modes = tuple(INTERVAL if k == "interval_transition" else EXACT for _, _, k in rows_s[1:])
        last = len(rows_s) > 1 and rows_s[-1][2] in ("transition", "interval_transition")
        for _, _, k in rows_s[1:-1]:
            if k in ("censor", "start"):
                raise ValueError(f"subject {sid}: {k} row must be {'first' if k == 'start' else 'last'}")
        subjects.append(SubjectRecord(cov[sid], obs, last, modes, entry_time=obs[0][0], subject_id=sid))
    return Dataset(tuple(subjects), topo, names)


def read_dataset_dir(path, prefix: str = "") -> Dataset:
    p = Path(path)
    return read_dataset(p / f"{prefix}events.csv", p / f"{prefix}covariates.csv", p / f"{prefix}topology.json")


# ---------------------------------------------------------------- splits and tables

def write_json(path, obj):
    with _open_w(path) as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_rows(path, header, rows):
    with _open_w(path) as fh:
        w = _writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_rows(path) -> tuple[list, list]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_history(path, history):
    from .likelihood import HISTORY_COLUMNS
    write_rows(path, HISTORY_COLUMNS, ([row[c] for c in HISTORY_COLUMNS] for row in history))


def write_occupation(path, ids, grid, occ, name: str = "p"):
    """Long-format curves ``subject_id,time,state,<name>`` from (n, G, S) values."""
    n, G, S = occ.shape

    def rows():
        for i in range(n):
            for k in range(G):
                for s in range(S):
                    yield ids[i], float(grid[k]), s + 1, float(occ[i, k, s])

    write_rows(path, ["subject_id", "time", "state", name], rows())


def write_bands(path, ids, grid, mean, lo, hi):
    n, G, S = mean.shape

    def rows():
        for i in range(n):
            for k in range(G):
                for s in range(S):
                    yield ids[i], float(grid[k]), s + 1, float(mean[i, k, s]), float(lo[i, k, s]), float(hi[i, k, s])

    write_rows(path, ["subject_id", "time", "state", "mean", "lo", "hi"], rows())


def read_occupation(path, value: str = "p") -> tuple[list, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_occupation`; returns ``(ids, grid, values (n, G, S))``."""
    header, rows = read_rows(path)
    col = header.index(value)
    ids, times, states = [], set(), set()
    seen = {}
    for r in rows:
        if r[0] not in seen:
            seen[r[0]] = len(ids)
            ids.append(r[0])
        times.add(float(r[1]))
        states.add(int(r[2]))
    grid = np.array(sorted(times))
    S = max(states)
    out = np.full((len(ids), grid.size, S), np.nan)
    tpos = {t: k for k, t in enumerate(grid)}
    for r in rows:
        out[seen[r[0]], tpos[float(r[1])], int(r[2]) - 1] = float(r[col])
    if np.isnan(out).any():
        raise ValueError(f"{path}: incomplete subject/time/state table")
    return ids, grid, out


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise OSError(f"output directory {p} is not writable")
    return p
