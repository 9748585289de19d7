"""State graphs, subject records and dataset containers.

States are 0-indexed everywhere in memory. File formats (see :mod:`kolmo.io`)
use 1-indexed labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

EXACT = "exact"
INTERVAL = "interval"


class TransitionTopology:
    """Directed graph of allowed transitions between ``n_states`` states.

    Parameters
    ----------
    allowed : (S, S) array_like of bool
        ``allowed[i, j]`` is true when the rate ``i -> j`` is modelled. The
        diagonal must be false.
    """

    def __init__(self, allowed):
        allowed = np.array(allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise ValueError(f"allowed mask must be square, got shape {allowed.shape}")
        if allowed.shape[0] < 1:
            raise ValueError("topology needs at least one state")
        if np.any(np.diag(allowed)):
            raise ValueError("diagonal of the allowed mask must be false")
        allowed.setflags(write=False)
        self.allowed = allowed

    @property
    def n_states(self) -> int:
        return self.allowed.shape[0]

    @property
    def q_count(self) -> int:
        return int(self.allowed.sum())

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Source and destination indices of the modelled rates, row-major.

        This is also the order of the rate head of the dynamics network.
        """
        src, dst = np.nonzero(self.allowed)
        return src.astype(np.intp), dst.astype(np.intp)

    @cached_property
    def absorbing(self) -> frozenset[int]:
        return frozenset(int(s) for s in np.flatnonzero(~self.allowed.any(axis=1)))

    @cached_property
    def reachable(self) -> np.ndarray:
        """Transitive closure of ``allowed`` (paths of length >= 1)."""
        reach = self.allowed.copy()
        for k in range(self.n_states):
            reach |= reach[:, [k]] & reach[[k], :]
        return reach

    def is_absorbing(self, state: int) -> bool:
        return state in self.absorbing

    def edge_index(self, i: int, j: int) -> int:
        """Position of rate ``i -> j`` in the rate head."""
        src, dst = self.edges
        hit = np.flatnonzero((src == i) & (dst == j))
        if hit.size == 0:
            raise KeyError(f"transition {i}->{j} is not in the topology")
        return int(hit[0])

    def __eq__(self, other):
        return isinstance(other, TransitionTopology) and np.array_equal(self.allowed, other.allowed)

    def __hash__(self):
        return hash(self.allowed.tobytes())

    def __repr__(self):
        src, dst = self.edges
        pairs = ", ".join(f"{a + 1}->{b + 1}" for a, b in zip(src, dst))
        return f"TransitionTopology(S={self.n_states}, [{pairs}])"

    @classmethod
    def from_edges(cls, n_states: int, edges: Sequence[tuple[int, int]]) -> "TransitionTopology":
        allowed = np.zeros((n_states, n_states), dtype=bool)
        for i, j in edges:
            allowed[i, j] = True
        return cls(allowed)


def two_state() -> TransitionTopology:
    return TransitionTopology.from_edges(2, [(0, 1)])


def illness_death() -> TransitionTopology:
    """Health (0) -> Illness (1), Health -> Death (2), Illness -> Death."""
    return TransitionTopology.from_edges(3, [(0, 1), (0, 2), (1, 2)])


def competing_risks(n_causes: int = 2) -> TransitionTopology:
    return TransitionTopology.from_edges(n_causes + 1, [(0, k) for k in range(1, n_causes + 1)])


@dataclass(frozen=True)
class SubjectRecord:
    """One observational unit.

    ``observations`` holds ``(time, state)`` pairs; the first pair is the
    entry record. ``obs_mode[j]`` describes how the state change between
    observation ``j`` and ``j + 1`` was observed. ``last_observed`` is the
    censoring flag: false means the subject was right-censored at the final
    observation time.
    """

    covariates: np.ndarray
    observations: tuple[tuple[float, int], ...]
    last_observed: bool = False
    obs_mode: tuple[str, ...] = ()
    entry_time: float = 0.0
    subject_id: str = ""

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64).reshape(-1)
        cov.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        obs = tuple((float(t), int(s)) for t, s in self.observations)
        object.__setattr__(self, "observations", obs)
        if not self.obs_mode:
            object.__setattr__(self, "obs_mode", (EXACT,) * max(len(obs) - 1, 0))
        else:
            object.__setattr__(self, "obs_mode", tuple(self.obs_mode))

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.observations], dtype=np.float64)

    @property
    def states(self) -> np.ndarray:
        return np.array([s for _, s in self.observations], dtype=np.intp)

    @property
    def initial_state(self) -> int:
        return self.observations[0][1]

    @property
    def final_time(self) -> float:
        return self.observations[-1][0]

    @property
    def final_state(self) -> int:
        return self.observations[-1][1]

    def state_at(self, t: float) -> int:
        """State occupied at time ``t`` (right-continuous path)."""
        state = self.observations[0][1]
        for time, s in self.observations[1:]:
            if time <= t:
                state = s
            else:
                break
        return state


@dataclass(frozen=True)
class CovariateStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float),
                   np.asarray(d.get("constant", [False] * len(d["mean"])), bool))


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[SubjectRecord, ...]
    topology: TransitionTopology
    covariate_names: tuple[str, ...] = ()
    normalization: CovariateStats | None = None

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        names = tuple(self.covariate_names)
        if not names and self.subjects:
            names = tuple(f"x{k}" for k in range(self.subjects[0].covariates.size))
        object.__setattr__(self, "covariate_names", names)

    def __len__(self):
        return len(self.subjects)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def covariate_matrix(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros((0, self.n_covariates))
        return np.stack([s.covariates for s in self.subjects])

    def subset(self, index) -> "Dataset":
        return replace(self, subjects=tuple(self.subjects[i] for i in index))

    def max_time(self) -> float:
        return max(s.final_time for s in self.subjects)

    def exit_data(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-subject exit time and event flag, for single-event metrics."""
        times = np.array([s.final_time for s in self.subjects])
        events = np.array([bool(s.last_observed) for s in self.subjects])
        return times, events


def validate_dataset(ds: Dataset) -> list[str]:
    """Check every subject against the record invariants.

    Returns a list of human-readable violations, each prefixed by the subject
    index. An empty list means the dataset is valid.
    """
    topo = ds.topology
    n_states = topo.n_states
    out = []
    for idx, subj in enumerate(ds.subjects):
        def bad(rule, detail=""):
            out.append(f"subject {idx}: {rule}" + (f" ({detail})" if detail else ""))

        if subj.covariates.size != ds.n_covariates:
            bad("covariate dimension mismatch", f"{subj.covariates.size} != {ds.n_covariates}")
        if not np.all(np.isfinite(subj.covariates)):
            bad("non-finite covariate")
        obs = subj.observations
        if not obs:
            bad("no observations")
            continue
        if len(subj.obs_mode) != len(obs) - 1:
            bad("obs_mode length mismatch")
        if any(m not in (EXACT, INTERVAL) for m in subj.obs_mode):
            bad("unknown observation mode")
        times = subj.times
        if not np.all(np.isfinite(times)) or times.min() < 0:
            bad("negative or non-finite time")
        if np.any(np.diff(times) <= 0):
            bad("non-increasing times")
        if times[0] < subj.entry_time:
            bad("observation before entry time")
        states = subj.states
        if np.any((states < 0) | (states >= n_states)):
            bad("state out of range")
            continue
        if len(obs) == 1 and subj.last_observed:
            bad("observed event without a transition")
        for j in range(1, len(obs)):
            a, b = states[j - 1], states[j]
            mode = subj.obs_mode[j - 1] if j - 1 < len(subj.obs_mode) else EXACT
            final = j == len(obs) - 1
            if a == b:
                # only a trailing censoring record may repeat the state
                if not final or subj.last_observed:
                    bad("transition not allowed", f"{a + 1}->{b + 1} at t={times[j]:g}")
                continue
            if topo.is_absorbing(int(a)):
                bad("left absorbing state", f"{a + 1}->{b + 1} at t={times[j]:g}")
                continue
            ok = topo.allowed[a, b] if mode == EXACT else topo.reachable[a, b]
            if not ok:
                bad("transition not allowed", f"{a + 1}->{b + 1} at t={times[j]:g}")
    if ds.normalization is not None and np.any(ds.normalization.std <= 0):
        out.append("dataset: normalization std must be positive")
    return out


def normalize_covariates(ds: Dataset, stats: CovariateStats | None = None) -> tuple[Dataset, CovariateStats]:
    """Z-score the covariates.

    With ``stats=None`` the moments (population std) are estimated from ``ds``.
    Columns with zero spread get ``std = 1`` and are flagged in
    ``stats.constant``. Pass the training stats to transform a test split.
    """
    x = ds.covariate_matrix()
    if stats is None:
        mean = x.mean(axis=0) if len(x) else np.zeros(ds.n_covariates)
        std = x.std(axis=0) if len(x) else np.ones(ds.n_covariates)
        constant = ~(std > 0)
        std = np.where(constant, 1.0, std)
        stats = CovariateStats(mean, std, constant)
    elif stats.mean.size != ds.n_covariates:
        raise ValueError(f"stats dimension {stats.mean.size} != covariate count {ds.n_covariates}")
    z = stats.apply(x) if len(x) else x
    subjects = tuple(replace(s, covariates=z[i]) for i, s in enumerate(ds.subjects))
    return replace(ds, subjects=subjects, normalization=stats), stats
