"""Kaplan-Meier, Aalen-Johansen and the censoring-distribution KM.

Tie convention: at a time where events and censorings coincide, the events
happen first. Censored subjects are therefore still at risk for events at
their censoring time, and subjects with an event at ``t`` are no longer at
risk for censoring at ``t``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .statespace import EXACT, Dataset


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function.

    ``values[k]`` holds on ``[times[k], times[k+1])``; ``initial`` holds
    before ``times[0]``. ``values`` may carry trailing axes (one curve per
    state, say).
    """

    times: np.ndarray
    values: np.ndarray
    initial: float | np.ndarray = 1.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape[:1] != times.shape:
            raise ValueError("need one value per jump time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("jump times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=np.float64))

    def _lookup(self, t, side):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side=side) - 1
        table = np.concatenate([np.broadcast_to(self.initial, (1,) + self.values.shape[1:]), self.values])
        return table[idx + 1]

    def __call__(self, t):
        return self._lookup(t, "right")

    def left(self, t):
        """Left limit ``f(t-)``."""
        return self._lookup(t, "left")


def _check(times, events):
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events).astype(bool).reshape(-1)
    if times.size == 0:
        raise ValueError("empty input")
    if times.shape != events.shape:
        raise ValueError("times and events must have the same length")
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise ValueError("times must be finite and nonnegative")
    return times, events


def kaplan_meier(times, events) -> StepFunction:
    """Product-limit estimate of ``S(t)`` from exit times and event flags."""
    times, events = _check(times, events)
    order = np.sort(times)
    jumps = np.unique(times[events])
    at_risk = order.size - np.searchsorted(order, jumps, side="left")
    deaths = np.searchsorted(np.sort(times[events]), jumps, side="right") - \
        np.searchsorted(np.sort(times[events]), jumps, side="left")
    return StepFunction(jumps, np.cumprod(1.0 - deaths / at_risk), 1.0)


def censoring_km(times, events) -> StepFunction:
    """KM of the censoring distribution ``G(t)``.

    Flags are flipped; under the tie convention a subject with an event at
    ``t`` has left the risk set before the censorings at ``t``.
    """
    times, events = _check(times, events)
    cens = np.sort(times[~events])
    jumps = np.unique(cens)
    later = times.size - np.searchsorted(np.sort(times), jumps, side="right")
    count = np.searchsorted(cens, jumps, side="right") - np.searchsorted(cens, jumps, side="left")
    at_risk = later + count
    return StepFunction(jumps, np.cumprod(1.0 - count / at_risk), 1.0)


def _segments(ds: Dataset):
    """(start, end, state) of each sojourn, plus transitions (time, from, to)."""
    starts, ends, states = [], [], []
    tr_t, tr_a, tr_b = [], [], []
    for idx, subj in enumerate(ds.subjects):
        if any(m != EXACT for m in subj.obs_mode):
            raise ValueError(f"subject {idx}: Aalen-Johansen needs exact transition times")
        obs = subj.observations
        t_prev, s_prev = obs[0]
        for t, s in obs[1:]:
            if s != s_prev:
                starts.append(t_prev)
                ends.append(t)
                states.append(s_prev)
                tr_t.append(t)
                tr_a.append(s_prev)
                tr_b.append(s)
                t_prev, s_prev = t, s
        if subj.final_time > t_prev:
            starts.append(t_prev)
            ends.append(subj.final_time)
            states.append(s_prev)
    return (np.array(starts, float), np.array(ends, float), np.array(states, np.intp),
            np.array(tr_t, float), np.array(tr_a, np.intp), np.array(tr_b, np.intp))


def aalen_johansen_matrix(ds: Dataset) -> StepFunction:
    """Product integral ``P(0, t]`` of Nelson-Aalen increments, as (K, S, S) steps."""
    S = ds.topology.n_states
    starts, ends, states, tr_t, tr_a, tr_b = _segments(ds)
    jumps = np.unique(tr_t)
    # n_i(u) = sojourns in i with start < u <= end
    at_risk = np.zeros((len(jumps), S))
    for i in range(S):
        sel = states == i
        s_sorted, e_sorted = np.sort(starts[sel]), np.sort(ends[sel])
        at_risk[:, i] = np.searchsorted(s_sorted, jumps, side="left") - np.searchsorted(e_sorted, jumps, side="left")
    counts = np.zeros((len(jumps), S, S))
    np.add.at(counts, (np.searchsorted(jumps, tr_t), tr_a, tr_b), 1.0)
    P = np.eye(S)
    values = np.empty((len(jumps), S, S))
    for k in range(len(jumps)):
        step = np.zeros((S, S))
        for i in range(S):
            if at_risk[k, i] > 0:
                step[i] = counts[k, i] / at_risk[k, i]
            step[i, i] = 0.0
            # diagonal as one minus the row so every factor is exactly stochastic
            step[i, i] = 1.0 - step[i].sum()
        P = P @ step
        values[k] = P
    return StepFunction(jumps, values, np.eye(S))


def aalen_johansen(ds: Dataset, grid) -> np.ndarray:
    """Occupation probabilities (len(grid), S) from the initial-state mix.

    The initial distribution is the empirical distribution of the subjects'
    first recorded states. Past the last observation the estimate stays flat
    and a warning is issued.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    grid = np.asarray(grid, dtype=np.float64)
    S = ds.topology.n_states
    init = np.bincount([s.initial_state for s in ds.subjects], minlength=S) / len(ds)
    last = ds.max_time()
    if grid.size and grid.max() > last:
        warnings.warn(f"grid extends past the last observation at t={last:g}; estimate held flat",
                      stacklevel=2)
    P = aalen_johansen_matrix(ds)(grid)
    return np.einsum("i,gij->gj", init, P)


def occurrence_exposure(ds: Dataset) -> np.ndarray:
    """Crude constant rate per modelled transition: events over time at risk.

    Ordered like ``ds.topology.edges``; interval-observed changes are
    skipped, and their sojourns are cut at the last exact observation.
    """
    topo = ds.topology
    src, dst = topo.edges
    S = topo.n_states
    exposure = np.zeros(S)
    counts = np.zeros((S, S))
    for subj in ds.subjects:
        obs = subj.observations
        for j in range(1, len(obs)):
            (t0, a), (t1, b) = obs[j - 1], obs[j]
            if subj.obs_mode[j - 1] != EXACT:
                continue
            exposure[a] += t1 - t0
            if a != b and (j < len(obs) - 1 or subj.last_observed):
                counts[a, b] += 1
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.where(exposure[src] > 0, counts[src, dst] / exposure[src], 0.0)
    return rates
