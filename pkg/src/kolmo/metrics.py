"""Discrimination and calibration metrics for survival and multi-state predictions.

Single-event metrics take predicted survival curves as a ``(n, G)`` array
evaluated on the metric grid, or as :class:`SurvivalCurves` that can be
evaluated anywhere by linear interpolation. Censoring is handled by
inverse-probability-of-censoring weights from :func:`censoring_km`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from . import kernels
from .nonparam import StepFunction, censoring_km
from .statespace import Dataset

WEIGHT_CAP = 100.0
G_FLOOR = 1e-3
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class EvalGrid:
    times: np.ndarray
    rule: str
    count: int

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.size == 0 or np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing and nonempty")
        if self.rule not in ("quantile", "uniform"):
            raise ValueError(f"unknown grid rule {self.rule!r}")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "count", int(t.size))


def quantile_grid(times, events, n: int = 100, tail: float = 0.01) -> EvalGrid:
    """``n`` equally spaced quantiles of the observed event times, tails excluded."""
    times = np.asarray(times, dtype=np.float64)
    ev = times[np.asarray(events, dtype=bool)]
    if ev.size == 0:
        raise ValueError("no observed events to build a grid from")
    q = np.unique(np.quantile(ev, np.linspace(tail, 1.0 - tail, n)))
    return EvalGrid(q, "quantile", q.size)


def uniform_grid(lo: float, hi: float, n: int = 100) -> EvalGrid:
    return EvalGrid(np.linspace(lo, hi, n), "uniform", n)


@dataclass
class SurvivalCurves:
    """Per-subject curves ``values[i, k] = S_i(times[k])``, linearly interpolated.

    Outside ``times`` the curves are held at their end values.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[1] != self.times.size:
            raise ValueError("curve values must have one column per time")

    def at(self, t) -> np.ndarray:
        """Values of every curve at the times ``t``, shape (n, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        grid = self.times
        if grid.size == 1:
            return np.repeat(self.values, t.size, axis=1)
        k = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, grid.size - 2)
        w = np.clip((t - grid[k]) / (grid[k + 1] - grid[k]), 0.0, 1.0)
        return self.values[:, k] * (1.0 - w) + self.values[:, k + 1] * w


def _on_grid(pred, grid: np.ndarray) -> np.ndarray:
    if isinstance(pred, SurvivalCurves):
        return pred.at(grid)
    arr = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if arr.shape[-1] != grid.size:
        raise ValueError(f"predictions have {arr.shape[-1]} columns for a grid of {grid.size}")
    return arr


def _grid_times(grid) -> np.ndarray:
    return grid.times if isinstance(grid, EvalGrid) else np.asarray(grid, dtype=np.float64)


def concordance_td(curves: SurvivalCurves, times, events) -> float:
    """Time-dependent concordance.

    A pair is comparable when ``i`` has an observed event at ``t_i`` and
    ``t_j > t_i``; it is concordant when ``S_i(t_i) < S_j(t_i)``. Prediction
    ties count one half.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if curves.values.shape[0] != times.size:
        raise ValueError("one curve per subject required")
    ev = np.flatnonzero(events)
    if ev.size == 0:
        raise ValueError("no comparable pairs: no observed events")
    surv = curves.at(times[ev]).T  # (n_ev, n)
    conc, comp = kernels.concordance_counts(surv, ev, times)
    if comp == 0:
        raise ValueError("no comparable pairs")
    return float(conc / comp)


@dataclass
class WeightedCurve:
    grid: np.ndarray
    curve: np.ndarray
    integrated: float
    n_capped: int


def _integrate(grid, curve):
    if grid.size < 2:
        return float(curve[0]) if curve.size else float("nan")
    return float(trapezoid(curve, grid) / (grid[-1] - grid[0]))


def _ipcw_weights(times, events, G: StepFunction, grid):
    """Weights (n, G) and outcome masks for the Graf decomposition.

    Returns ``(w, died, alive, n_capped)`` where ``died[i, k]`` marks an event
    at or before ``grid[k]`` and ``alive[i, k]`` marks ``T_i > grid[k]``.
    """
    died = (times[:, None] <= grid[None, :]) & events[:, None]
    alive = times[:, None] > grid[None, :]
    g_event = np.asarray(G.left(times), dtype=np.float64)
    g_grid = np.asarray(G(grid), dtype=np.float64)

    def inv(g):
        return 1.0 / np.maximum(g, G_FLOOR)

    w_event = inv(g_event)
    w_grid = inv(g_grid)
    w = np.where(died, w_event[:, None], 0.0) + np.where(alive, w_grid[None, :], 0.0)
    capped = int(np.sum(w > WEIGHT_CAP))
    return np.minimum(w, WEIGHT_CAP), died, alive, capped


def brier_ipcw(pred, times, events, G: StepFunction | None, grid) -> WeightedCurve:
    """Graf's IPCW Brier score curve and its integral normalized by the span.

    ``G`` defaults to :func:`censoring_km` on ``(times, events)``.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    grid = _grid_times(grid)
    S = _on_grid(pred, grid)
    if S.shape[0] != times.size:
        raise ValueError("one prediction row per subject required")
    G = censoring_km(times, events) if G is None else G
    w, died, alive, capped = _ipcw_weights(times, events, G, grid)
    loss = np.where(died, S ** 2, 0.0) + np.where(alive, (1.0 - S) ** 2, 0.0)
    curve = np.mean(w * loss, axis=0)
    return WeightedCurve(grid, curve, _integrate(grid, curve), capped)


def ibll(pred, times, events, G: StepFunction | None, grid) -> WeightedCurve:
    """Integrated binomial log-likelihood; higher is better, at most 0."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    grid = _grid_times(grid)
    S = np.clip(_on_grid(pred, grid), PROB_CLAMP, 1.0 - PROB_CLAMP)
    if S.shape[0] != times.size:
        raise ValueError("one prediction row per subject required")
    G = censoring_km(times, events) if G is None else G
    w, died, alive, capped = _ipcw_weights(times, events, G, grid)
    ll = np.where(died, np.log1p(-S), 0.0) + np.where(alive, np.log(S), 0.0)
    curve = np.mean(w * ll, axis=0)
    return WeightedCurve(grid, curve, _integrate(grid, curve), capped)


def _known_states(ds: Dataset, grid):
    """State at each grid time (-1 when unknown) and the two "known" masks.

    A subject's state is known while it is under observation and forever
    after it enters an absorbing state with an observed event.
    """
    topo = ds.topology
    n, G = len(ds), grid.size
    state = np.full((n, G), -1, dtype=np.intp)
    absorbed = np.zeros((n, G), dtype=bool)
    observed = np.zeros((n, G), dtype=bool)
    for i, subj in enumerate(ds.subjects):
        t_obs = subj.times
        idx = np.searchsorted(t_obs, grid, side="right") - 1
        inside = (grid < subj.final_time) & (idx >= 0)
        done = subj.last_observed and topo.is_absorbing(subj.final_state)
        after = (grid >= subj.final_time) & done
        st = subj.states
        state[i, inside] = st[idx[inside]]
        state[i, after] = subj.final_state
        observed[i] = inside
        absorbed[i] = after
    return state, observed, absorbed


def multistate_brier(occ, ds: Dataset, G: StepFunction | None, grid) -> WeightedCurve:
    """Per-state IPCW Brier curves for occupation predictions ``occ`` (n, G, S).

    Returns a :class:`WeightedCurve` whose ``curve`` is (G, S) and whose
    ``integrated`` is the per-state integral as an array.
    """
    grid = _grid_times(grid)
    occ = np.asarray(occ, dtype=np.float64)
    n, S = len(ds), ds.topology.n_states
    if occ.shape != (n, grid.size, S):
        raise ValueError(f"occupation shape {occ.shape} != {(n, grid.size, S)}")
    times, events = ds.exit_data()
    G = censoring_km(times, events) if G is None else G
    state, observed, absorbed = _known_states(ds, grid)
    w_exit = 1.0 / np.maximum(np.asarray(G.left(times)), G_FLOOR)
    w_grid = 1.0 / np.maximum(np.asarray(G(grid)), G_FLOOR)
    w = np.where(observed, w_grid[None, :], 0.0) + np.where(absorbed, w_exit[:, None], 0.0)
    capped = int(np.sum(w > WEIGHT_CAP))
    w = np.minimum(w, WEIGHT_CAP)
    onehot = (state[:, :, None] == np.arange(S)[None, None, :]).astype(np.float64)
    curve = np.mean(w[:, :, None] * (onehot - occ) ** 2, axis=0)
    integ = np.array([_integrate(grid, curve[:, j]) for j in range(S)])
    return WeightedCurve(grid, curve, integ, capped)


def brier_vs_truth(pred, truth) -> np.ndarray:
    """Mean over subjects of ``(P_hat - P_true)^2``, shape (G, S)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(getattr(truth, "occupation", truth), dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return np.mean((pred - truth) ** 2, axis=0)


def time_average(grid, curve) -> np.ndarray:
    """Trapezoidal time average of a (G, ...) curve."""
    grid = _grid_times(grid)
    curve = np.asarray(curve, dtype=np.float64)
    if grid.size < 2:
        return curve[0]
    return trapezoid(curve, grid, axis=0) / (grid[-1] - grid[0])


def interval_coverage(lo, hi, truth, grid=None, truth_grid=None) -> float:
    """Fraction of (subject, time, state) cells with ``lo <= p_true <= hi``."""
    if grid is not None and truth_grid is not None:
        if not np.allclose(_grid_times(grid), _grid_times(truth_grid)):
            raise ValueError("band grid does not match the truth grid")
    p = np.asarray(getattr(truth, "occupation", truth), dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != p.shape or hi.shape != p.shape:
        raise ValueError(f"band shape {lo.shape} does not match truth shape {p.shape}")
    return float(np.mean((lo <= p) & (p <= hi)))
