"""Single-event benchmark data: a converter for the public CSV exports and a stand-in.

The public METABRIC export (as distributed with pycox) has columns
``x0..x8, duration, event`` and 1904 rows. It is not bundled. Point
``KOLMO_METABRIC_CSV`` at a local copy to use it; otherwise
:func:`load_metabric` falls back to a synthetic stand-in of the same shape
(1904 x 9, about 42% censored, durations in months) that ships with the
package and is regenerated exactly by :func:`make_metabric_standin`.

Run ``python -m kolmo.datasets <csv> <out_dir>`` to convert a CSV export to
the harness file formats.
"""
from __future__ import annotations

import csv
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .statespace import Dataset, SubjectRecord, two_state

METABRIC_ENV = "KOLMO_METABRIC_CSV"
STANDIN_NAME = "metabric_standin.csv"
METABRIC_COLUMNS = ("x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8")


def survival_dataset(x, durations, events, names=None, ids=None) -> Dataset:
    """Two-state dataset from exit times and event flags.

    Nonpositive durations are moved to half the smallest positive duration
    so every record has a strictly positive exit time.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(durations, dtype=np.float64).copy()
    e = np.asarray(events).astype(bool)
    if not (x.shape[0] == t.size == e.size):
        raise ValueError("covariates, durations and events must have the same length")
    pos = t[t > 0]
    if pos.size == 0:
        raise ValueError("no positive durations")
    t[t <= 0] = 0.5 * pos.min()
    subjects = []
    for i in range(t.size):
        sid = str(ids[i]) if ids is not None else str(i + 1)
        subjects.append(SubjectRecord(x[i], [(0.0, 0), (t[i], 1 if e[i] else 0)], bool(e[i]), subject_id=sid))
    names = tuple(names) if names is not None else tuple(f"x{k}" for k in range(x.shape[1]))
    return Dataset(tuple(subjects), two_state(), names)


def read_survival_csv(path, duration_col: str = "duration", event_col: str = "event") -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in reader.fieldnames if c not in (duration_col, event_col)]
        if duration_col not in reader.fieldnames or event_col not in reader.fieldnames:
            raise ValueError(f"{path}: needs {duration_col!r} and {event_col!r} columns")
        rows = list(reader)
    x = np.array([[float(r[c]) for c in cols] for r in rows])
    t = np.array([float(r[duration_col]) for r in rows])
    e = np.array([float(r[event_col]) != 0 for r in rows])
    return survival_dataset(x, t, e, cols)


def make_metabric_standin(seed: int = 2019, n: int = 1904) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic cohort shaped like METABRIC: 4 expression-like, 4 binary, 1 age column.

    Event times follow a Weibull model with a mildly nonlinear, partly
    non-proportional risk; censoring is uniform over follow-up.
    """
    rng = np.random.default_rng(seed)
    genes = rng.normal([6.0, 6.2, 5.8, 10.8], [0.9, 0.8, 1.1, 1.2], size=(n, 4))
    binary = (rng.random((n, 4)) < np.array([0.62, 0.61, 0.21, 0.76])).astype(float)
    age = np.clip(rng.normal(61.0, 12.9, n), 21.0, 96.0)
    x = np.column_stack([genes, binary, age])
    z = (genes - genes.mean(axis=0)) / genes.std(axis=0)
    a = (age - 61.0) / 12.9
    risk = 0.65 * (0.55 * z[:, 0] - 0.25 * z[:, 1] - 0.35 * z[:, 2] + 0.3 * np.tanh(z[:, 3])
                   + 0.2 * binary[:, 0] - 0.25 * binary[:, 1] + 0.45 * binary[:, 2] - 0.4 * binary[:, 3]
                   + 0.5 * a + 0.25 * a ** 2)
    shape = np.where(binary[:, 3] > 0, 1.4, 0.9)
    t_event = 150.0 * (rng.exponential(size=n) * np.exp(-risk)) ** (1.0 / shape)
    t_cens = rng.uniform(5.0, 295.0, n)
    t = np.minimum(t_event, t_cens)
    e = t_event <= t_cens
    return np.round(x, 6), np.round(np.maximum(t, 0.01), 3), e


def write_survival_csv(path, x, t, e):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*METABRIC_COLUMNS[:x.shape[1]], "duration", "event"])
        for i in range(t.size):
            w.writerow([*(repr(float(v)) for v in x[i]), repr(float(t[i])), int(e[i])])


def standin_path() -> Path:
    return Path(resources.files("kolmo") / "data" / STANDIN_NAME)


def load_metabric(path=None) -> tuple[Dataset, str]:
    """METABRIC from ``path`` or ``$KOLMO_METABRIC_CSV``, else the stand-in.

    Returns the dataset and a label naming the source.
    """
    path = path or os.environ.get(METABRIC_ENV)
    if path:
        return read_survival_csv(path), f"metabric:{path}"
    return read_survival_csv(standin_path()), "metabric-standin"


def main(argv=None) -> int:
    from .io import write_dataset
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: python -m kolmo.datasets <survival.csv> <out_dir>", file=sys.stderr)
        return 2
    write_dataset(argv[1], read_survival_csv(argv[0]))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
