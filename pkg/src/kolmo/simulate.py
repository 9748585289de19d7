"""Ground-truth data: inhomogeneous Markov jump processes with known hazards.

Each modelled transition ``i -> j`` has hazard

    h_ij(t | x) = (k / s) * (t / s) ** (k - 1) * exp(sum_c beta_c(t) * x_c)

with Weibull shape ``k`` and scale ``s``. Coefficients flagged as
time-varying follow ``beta_c(t) = beta_c * saw(t)`` with the saw-tooth
``saw(t) = amplitude * frac(t / period)``. Paths are drawn by thinning
against a per-interval upper bound of the total exit rate.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import brentq

from .odeint import SolveConfig, solve, OdeSystem
from .statespace import Dataset, SubjectRecord, TransitionTopology


class ThinningBoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransitionHazard:
    """Weibull hazard of one transition; ``scale=inf`` blocks it."""

    src: int
    dst: int
    shape: float
    scale: float
    beta: tuple[float, ...] = ()


@dataclass(frozen=True)
class CovariateSpec:
    """``kind`` is "bernoulli" (param p) or "uniform" (params low, high)."""

    name: str
    kind: str = "bernoulli"
    params: tuple[float, ...] = (0.5,)

    def sample(self, rng, n):
        if self.kind == "bernoulli":
            return (rng.random(n) < self.params[0]).astype(np.float64)
        if self.kind == "uniform":
            lo, hi = self.params
            return rng.uniform(lo, hi, n)
        raise ValueError(f"unknown covariate kind {self.kind!r}")


@dataclass(frozen=True)
class TrueHazardSpec:
    n_states: int
    hazards: tuple[TransitionHazard, ...]
    covariates: tuple[CovariateSpec, ...]
    horizon: float
    time_varying: tuple[int, ...] = ()
    saw_amplitude: float = 1.0
    saw_period: float | None = None
    censor_fraction: float | None = 0.3
    censor_rate: float | None = None
    initial_state: int = 0
    bound_step: float | None = None
    n_subjects: int = 1000
    seed: int = 0

    def __post_init__(self):
        for h in self.hazards:
            if h.shape < 1.0 or h.scale <= 0:
                # shape < 1 has an unbounded hazard at t=0, which thinning cannot dominate
                raise ValueError(f"transition {h.src + 1}->{h.dst + 1}: need shape >= 1 and scale > 0")
            if len(h.beta) not in (0, len(self.covariates)):
                raise ValueError("coefficient vector length must match the covariate count")
        if self.period <= 0:
            raise ValueError("saw-tooth period must be positive")
        if self.censor_rate is not None and self.censor_rate < 0:
            raise ValueError("censoring rate must be nonnegative")
        if self.censor_fraction is not None and not 0 <= self.censor_fraction < 1:
            raise ValueError("censoring fraction must be in [0, 1)")

    @property
    def period(self) -> float:
        return self.saw_period if self.saw_period is not None else self.horizon / 4.0

    @property
    def topology(self) -> TransitionTopology:
        return TransitionTopology.from_edges(self.n_states, [(h.src, h.dst) for h in self.hazards])

    @property
    def n_covariates(self) -> int:
        return len(self.covariates)

    def beta_matrix(self) -> np.ndarray:
        """(q, d) coefficients ordered like ``topology.edges``."""
        src, dst = self.topology.edges
        lookup = {(h.src, h.dst): h for h in self.hazards}
        d = self.n_covariates
        out = np.zeros((len(src), d))
        for k, (a, b) in enumerate(zip(src, dst)):
            beta = lookup[(a, b)].beta
            if beta:
                out[k] = beta
        return out

    def weibull(self) -> tuple[np.ndarray, np.ndarray]:
        src, dst = self.topology.edges
        lookup = {(h.src, h.dst): h for h in self.hazards}
        shape = np.array([lookup[(a, b)].shape for a, b in zip(src, dst)])
        scale = np.array([lookup[(a, b)].scale for a, b in zip(src, dst)])
        return shape, scale


def spec_to_dict(spec: TrueHazardSpec) -> dict:
    d = asdict(spec)
    d["hazards"] = [dict(h, beta=list(h["beta"])) for h in d["hazards"]]
    d["covariates"] = [dict(c, params=list(c["params"])) for c in d["covariates"]]
    d["time_varying"] = list(spec.time_varying)
    for h in d["hazards"]:
        if not np.isfinite(h["scale"]):
            h["scale"] = "inf"
    return d


def spec_from_dict(d: dict) -> TrueHazardSpec:
    d = dict(d)
    known = {f.name for f in fields(TrueHazardSpec)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown spec keys: {sorted(unknown)}")
    d["hazards"] = tuple(TransitionHazard(h["src"], h["dst"], float(h["shape"]), float(h["scale"]),
                                          tuple(h.get("beta", ()))) for h in d["hazards"])
    d["covariates"] = tuple(CovariateSpec(c["name"], c.get("kind", "bernoulli"), tuple(c.get("params", (0.5,))))
                            for c in d.get("covariates", ()))
    d["time_varying"] = tuple(d.get("time_varying", ()))
    return TrueHazardSpec(**d)


def saw(spec: TrueHazardSpec, t):
    return spec.saw_amplitude * np.mod(np.asarray(t, dtype=np.float64) / spec.period, 1.0)


def true_rates(spec: TrueHazardSpec, t, x) -> np.ndarray:
    """Hazards (B, q) at times ``t`` (B,) for covariates ``x`` (B, d)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    x = np.atleast_2d(x)
    shape, scale = spec.weibull()
    beta = spec.beta_matrix()
    base = (shape / scale) * (np.maximum(t[:, None], 0.0) / scale) ** (shape - 1.0)
    coef = np.broadcast_to(beta, (len(t),) + beta.shape).copy()
    if spec.time_varying:
        tv = list(spec.time_varying)
        coef[:, :, tv] *= saw(spec, t)[:, None, None]
    lin = np.einsum("bqd,bd->bq", coef, x)
    return base * np.exp(lin)


def _rate_bound(spec, state, t0, t1, x):
    """Upper bound on the total exit rate of ``state`` over [t0, t1] per subject."""
    src, _ = spec.topology.edges
    shape, scale = spec.weibull()
    beta = spec.beta_matrix()
    out = np.zeros(len(t0))
    for k in range(len(src)):
        sel = state == src[k]
        if not sel.any():
            continue
        # shape >= 1: baseline is nondecreasing, sup at the right end
        base = (shape[k] / scale[k]) * (t1[sel] / scale[k]) ** (shape[k] - 1.0)
        static = np.ones(spec.n_covariates, dtype=bool)
        static[list(spec.time_varying)] = False
        lin = x[sel][:, static] @ beta[k, static]
        if spec.time_varying:
            tv = list(spec.time_varying)
            lin = lin + np.maximum(0.0, x[sel][:, tv] * beta[k, tv] * spec.saw_amplitude).sum(axis=1)
        out[sel] += base * np.exp(lin)
    return out


def sample_covariates(spec: TrueHazardSpec, n: int, rng) -> np.ndarray:
    if not spec.covariates:
        return np.zeros((n, 0))
    return np.stack([c.sample(rng, n) for c in spec.covariates], axis=1)


def _sample_uncensored(spec: TrueHazardSpec, x, rng):
    """Full paths on [0, horizon]; returns per-subject lists of (time, state)."""
    n = x.shape[0]
    topo = spec.topology
    src, dst = topo.edges
    absorbing = np.array([topo.is_absorbing(s) for s in range(spec.n_states)])
    step = spec.bound_step or spec.horizon / 100.0
    t = np.zeros(n)
    state = np.full(n, spec.initial_state, dtype=np.intp)
    paths = [[(0.0, spec.initial_state)] for _ in range(n)]
    active = ~absorbing[state]
    while active.any():
        idx = np.flatnonzero(active)
        ta = t[idx]
        end = np.minimum((np.floor(ta / step + 1e-12) + 1.0) * step, spec.horizon)
        bound = _rate_bound(spec, state[idx], ta, end, x[idx])
        with np.errstate(divide="ignore"):
            cand = ta + rng.exponential(size=len(idx)) / bound
        jump = cand < end
        t[idx[~jump]] = end[~jump]
        if jump.any():
            j_idx = idx[jump]
            tc = cand[jump]
            rates = true_rates(spec, tc, x[j_idx])
            rates = np.where(src[None, :] == state[j_idx][:, None], rates, 0.0)
            total = rates.sum(axis=1)
            bj = bound[jump]
            over = total > bj * (1.0 + 1e-12)
            if over.any():
                k = int(np.flatnonzero(over)[0])
                e = int(np.argmax(rates[k]))
                raise ThinningBoundError(
                    f"transition {src[e] + 1}->{dst[e] + 1}: rate {total[k]:.6g} exceeds bound "
                    f"{bj[k]:.6g} at t={tc[k]:.6g}")
            u = rng.random(len(j_idx))
            accept = u * bj < total
            t[j_idx] = tc
            for pos in np.flatnonzero(accept):
                b = j_idx[pos]
                p = rates[pos] / total[pos]
                e = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
                e = min(e, len(p) - 1)
                state[b] = dst[e]
                paths[b].append((float(tc[pos]), int(dst[e])))
        active = ~absorbing[state] & (t < spec.horizon)
    return paths


def _censor_rate_for(target, absorb_times):
    """Exponential censoring rate giving expected censored fraction ``target``."""
    finite = np.isfinite(absorb_times)

    def frac(rate):
        cens = (~finite).astype(float)
        cens[finite] = 1.0 - np.exp(-rate * absorb_times[finite])
        return cens.mean() - target

    if frac(0.0) >= 0:
        return 0.0
    hi = 1.0 / max(np.median(absorb_times[finite]), 1e-12)
    while frac(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            raise ValueError("cannot reach the censoring target")
    return brentq(frac, 0.0, hi, xtol=1e-14, rtol=1e-12)


def sample_paths(spec: TrueHazardSpec, n: int | None = None, seed: int | None = None) -> Dataset:
    """Draw ``n`` subjects, right-censored at min(censoring time, horizon)."""
    n = spec.n_subjects if n is None else int(n)
    if n < 1:
        raise ValueError("need at least one subject")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    x = sample_covariates(spec, n, rng)
    paths = _sample_uncensored(spec, x, rng)
    topo = spec.topology
    absorb = np.array([p[-1][0] if topo.is_absorbing(p[-1][1]) and len(p) > 1 else np.inf for p in paths])
    rate = spec.censor_rate
    if rate is None:
        rate = _censor_rate_for(spec.censor_fraction, absorb) if spec.censor_fraction else 0.0
    cens = rng.exponential(size=n) / rate if rate > 0 else np.full(n, np.inf)
    cutoff = np.minimum(cens, spec.horizon)
    subjects = []
    for b, path in enumerate(paths):
        kept = [(t, s) for t, s in path if t <= cutoff[b] or t == 0.0]
        observed = len(kept) > 1 and topo.is_absorbing(kept[-1][1])
        if not observed and cutoff[b] > kept[-1][0]:
            kept.append((float(cutoff[b]), kept[-1][1]))
        subjects.append(SubjectRecord(x[b], kept, observed, subject_id=str(b + 1)))
    names = tuple(c.name for c in spec.covariates)
    return Dataset(tuple(subjects), topo, names)


@dataclass
class GroundTruth:
    """True occupation ``P(0,t)`` rows of the initial state and true hazards.

    ``occupation`` is (B, G, S); ``rates`` is (B, G, q), ordered like the
    topology's edges.
    """

    grid: np.ndarray
    occupation: np.ndarray
    rates: np.ndarray


def true_occupation(spec: TrueHazardSpec, x, grid, max_step: float = 1e-3) -> GroundTruth:
    """Integrate the true forward equation by rk4 with steps <= ``max_step``.

    Steps also end on every saw-tooth reset so the discontinuities of the
    time-varying coefficients never fall inside a step.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    grid = np.asarray(grid, dtype=np.float64)
    if grid.min() < 0 or grid.max() > spec.horizon + 1e-9:
        raise ValueError("grid must lie within [0, horizon]")
    B, S = x.shape[0], spec.n_states
    src, dst = spec.topology.edges
    t_end = float(grid.max())

    def rhs(t, p):
        lam = true_rates(spec, np.full(B, t), x)
        Q = np.zeros((B, S, S))
        Q[:, src, dst] = lam
        Q[:, np.arange(S), np.arange(S)] = -Q.sum(axis=2)
        return np.einsum("bi,bij->bj", p, Q)

    p0 = np.zeros((B, S))
    p0[:, spec.initial_state] = 1.0
    breaks = np.arange(spec.period, t_end, spec.period) if spec.time_varying else np.zeros(0)
    save = np.unique(np.concatenate([grid, breaks]))
    out = solve(OdeSystem(S, rhs), p0, (0.0, max(t_end, 0.0)),
                SolveConfig(method="rk4", step_size=max_step, save_at=save)) if t_end > 0 else \
        np.broadcast_to(p0, (len(save), B, S)).copy()
    pick = np.searchsorted(save, grid)
    occ = np.swapaxes(out[pick], 0, 1)
    rates = np.stack([true_rates(spec, np.full(B, t), x) for t in grid], axis=1)
    return GroundTruth(grid, occ, rates)


# ---------------------------------------------------------------- presets

def _covs(n_binary, n_uniform):
    out = [CovariateSpec(f"b{k}", "bernoulli", (0.5,)) for k in range(n_binary)]
    out += [CovariateSpec(f"u{k}", "uniform", (-1.0, 1.0)) for k in range(n_uniform)]
    return tuple(out)


_ID_BETA = {
    (0, 1): (0.8, -0.6, 0.5, 0.0, -0.4, 0.3, 0.6, -0.5, 0.0, 0.4, 0.2, -0.3),
    (0, 2): (-0.5, 0.7, 0.0, 0.6, 0.3, -0.4, -0.3, 0.5, 0.4, 0.0, -0.2, 0.3),
    (1, 2): (0.6, 0.4, -0.5, 0.3, 0.0, 0.5, 0.2, 0.0, -0.4, 0.5, 0.3, -0.2),
}


def presets() -> dict[str, TrueHazardSpec]:
    """Named simulation setups. Coefficients are fixed O(1) constants."""
    smoke = TrueHazardSpec(
        n_states=2, hazards=(TransitionHazard(0, 1, 1.0, 1.0, (0.0, 0.0)),),
        covariates=_covs(2, 0), horizon=5.0, censor_fraction=0.3, n_subjects=500, seed=7)
    ill = TrueHazardSpec(
        n_states=3,
        hazards=(TransitionHazard(0, 1, 1.5, 8.0, _ID_BETA[(0, 1)]),
                 TransitionHazard(0, 2, 1.2, 14.0, _ID_BETA[(0, 2)]),
                 TransitionHazard(1, 2, 1.6, 6.0, _ID_BETA[(1, 2)])),
        covariates=_covs(6, 6), horizon=10.0, time_varying=(0, 1), censor_fraction=0.3,
        n_subjects=5000, seed=11)
    comp = TrueHazardSpec(
        n_states=3,
        hazards=(TransitionHazard(0, 1, 1.3, 9.0, _ID_BETA[(0, 1)]),
                 TransitionHazard(0, 2, 1.1, 12.0, _ID_BETA[(0, 2)])),
        covariates=_covs(6, 6), horizon=10.0, time_varying=(0, 1), censor_fraction=0.3,
        n_subjects=5000, seed=13)
    surv = TrueHazardSpec(
        n_states=2, hazards=(TransitionHazard(0, 1, 1.4, 6.0, (0.9, -0.7, 0.6)),),
        covariates=(CovariateSpec("b0", "bernoulli", (0.5,)), CovariateSpec("u0", "uniform", (-1.0, 1.0)),
                    CovariateSpec("u1", "uniform", (-1.0, 1.0))),
        horizon=10.0, time_varying=(0,), censor_fraction=0.3, n_subjects=4096, seed=17)
    dominant = TrueHazardSpec(
        n_states=3,
        hazards=(TransitionHazard(0, 1, 1.5, 8.0, (2.2, 0.1, -0.1, 0.1)),
                 TransitionHazard(0, 2, 1.2, 14.0, (-1.5, 0.1, 0.1, -0.1)),
                 TransitionHazard(1, 2, 1.6, 6.0, (1.5, -0.1, 0.1, 0.1))),
        covariates=_covs(4, 0), horizon=10.0, censor_fraction=0.2, n_subjects=2000, seed=19)
    return {
        "two-state-smoke": smoke,
        "illness-death-5000": ill,
        "competing-risks-5000": comp,
        "survival-3cov": surv,
        "dominant-binary": dominant,
    }


def preset(name: str) -> TrueHazardSpec:
    table = presets()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(table)}")
    return table[name]


def split_indices(n: int, seed: int, fractions=(0.64, 0.16, 0.20)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled train/valid/test index split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_valid]), np.sort(perm[n_train + n_valid:])
