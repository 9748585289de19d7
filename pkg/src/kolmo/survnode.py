"""Neural Kolmogorov forward/backward system.

The state of one subject is the concatenation ``(P(0,t), P(t,0), m(t))`` of
the forward kernel, the backward kernel (the inverse of the forward one) and
the memory states, flattened row-major. ``P(s,t)`` for any pair of times is
``P(s,0) @ P(0,t)``.

Models work in scaled time ``tau = t * time_scale``; every public function
takes and returns times and rates in the data's original units.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .diffcore import Mlp, ParamVector, sigmoid, softplus
from .odeint import OdeSystem, SolveConfig, _rk4_run, _rk4_step_vjp, rk4_grid, solve
from .statespace import SubjectRecord, TransitionTopology

PREDICT_CFG = SolveConfig(method="dopri5", abs_tol=1e-8, rel_tol=1e-8)


class KolmogorovModel:
    """Base class: a rate/memory field plus an initial-memory map.

    Subclasses implement :meth:`rates_memory` and :meth:`initial_memory`.
    """

    topology: TransitionTopology
    n_memory: int
    n_covariates: int
    time_scale: float = 1.0
    params: ParamVector | None = None

    @property
    def n_states(self) -> int:
        return self.topology.n_states

    @property
    def state_dim(self) -> int:
        return 2 * self.n_states ** 2 + self.n_memory

    def rates_memory(self, tau, Pf, m, x, need_vjp=False):
        """Rates (B, q) after softplus and memory derivatives (B, M).

        With ``need_vjp`` also returns ``vjp(g_rates, g_dm) -> (gPf, gm)``.
        """
        raise NotImplementedError

    def initial_memory(self, x, train=False, rng=None, need_vjp=False):
        raise NotImplementedError

    # ------------------------------------------------------------ system

    def initial_state(self, m0) -> np.ndarray:
        m0 = np.atleast_2d(m0)
        B, S = m0.shape[0], self.n_states
        eye = np.broadcast_to(np.eye(S).reshape(1, -1), (B, S * S))
        return np.concatenate([eye, eye, m0], axis=1)

    def split(self, y):
        S2 = self.n_states ** 2
        S = self.n_states
        lead = y.shape[:-1]
        Pf = y[..., :S2].reshape(lead + (S, S))
        Pb = y[..., S2:2 * S2].reshape(lead + (S, S))
        return Pf, Pb, y[..., 2 * S2:]

    def field(self, tau, y, x, need_vjp=False):
        """d/dtau of the batched state ``y`` (B, D) at scaled times ``tau`` (B,)."""
        B = y.shape[0]
        src, dst = self.topology.edges
        Pf, Pb, m = self.split(y)
        if need_vjp:
            rates, dm, dvjp = self.rates_memory(tau, Pf, m, x, need_vjp=True)
        else:
            rates, dm = self.rates_memory(tau, Pf, m, x)
        Q = kernels.generator(rates, src, dst, self.n_states)
        dPf, dPb = kernels.kfe_kbe(Pf, Pb, Q)
        dy = np.concatenate([dPf.reshape(B, -1), dPb.reshape(B, -1), dm], axis=1)
        if not need_vjp:
            return dy

        def vjp(cot):
            cf, cb, cm = self.split(cot)
            gPf, gPb, gQ = kernels.kfe_kbe_vjp(Pf, Pb, Q, cf, cb)
            grates = kernels.generator_vjp(gQ, src, dst)
            gPf2, gm = dvjp(grates, cm)
            return np.concatenate([(gPf + gPf2).reshape(B, -1), gPb.reshape(B, -1), gm], axis=1)

        return dy, vjp

    def generator_matrices(self, tau, y, x) -> np.ndarray:
        """Rate matrices (B, S, S) in scaled units at the given states."""
        src, dst = self.topology.edges
        Pf, _, m = self.split(y)
        rates, _ = self.rates_memory(tau, Pf, m, x)
        return kernels.generator(rates, src, dst, self.n_states)


class SurvNodeModel(KolmogorovModel):
    """Encoder ``x -> m(0)`` and dynamics ``(t, P(0,t), m, x) -> (rates, dm/dt)``.

    Parameters
    ----------
    encoder_layers, dynamics_layers : sequence of int
        Hidden widths; ``(800, 800)`` means two hidden layers of 800 units.
    encoder_dropout : float
        Dropout on the encoder's hidden layers during training. The
        dynamics network never uses dropout.
    """

    def __init__(self, topology: TransitionTopology, n_covariates: int, n_memory: int = 20,
                 encoder_layers: Sequence[int] = (800, 800), dynamics_layers: Sequence[int] = (1000, 1000, 1000),
                 encoder_dropout: float = 0.0, time_scale: float = 1.0, seed: int | None = 0):
        if n_memory < 1:
            raise ValueError("SurvNodeModel needs at least one memory state")
        rng = np.random.default_rng(seed)
        self.topology = topology
        self.n_covariates = int(n_covariates)
        self.n_memory = int(n_memory)
        self.time_scale = float(time_scale)
        S = topology.n_states
        self.encoder = Mlp([self.n_covariates, *encoder_layers, self.n_memory], rng, dropout=encoder_dropout)
        self.dynamics = Mlp([1 + S * S + self.n_memory + self.n_covariates, *dynamics_layers,
                             topology.q_count + self.n_memory], rng)
        self.params = ParamVector([self.encoder, self.dynamics])

    def architecture(self) -> dict:
        return {
            "kind": "survnode",
            "allowed": self.topology.allowed.astype(int).tolist(),
            "n_covariates": self.n_covariates,
            "n_memory": self.n_memory,
            "encoder_layers": self.encoder.layer_sizes[1:-1],
            "dynamics_layers": self.dynamics.layer_sizes[1:-1],
            "encoder_dropout": self.encoder.dropout,
            "time_scale": self.time_scale,
        }

    def initial_memory(self, x, train=False, rng=None, need_vjp=False):
        return self.encoder.forward(np.atleast_2d(x), train=train, rng=rng, need_vjp=need_vjp)

    def rates_memory(self, tau, Pf, m, x, need_vjp=False):
        B = Pf.shape[0]
        S2 = self.n_states ** 2
        q = self.topology.q_count
        inp = np.concatenate([np.broadcast_to(np.reshape(tau, (-1, 1)), (B, 1)), Pf.reshape(B, S2), m, x], axis=1)
        if not need_vjp:
            out = self.dynamics.forward(inp)
            return softplus(out[:, :q]), out[:, q:]
        out, net_vjp = self.dynamics.forward(inp, need_vjp=True)
        raw = out[:, :q]
        slope = sigmoid(raw)

        def vjp(g_rates, g_dm):
            g_in = net_vjp(np.concatenate([g_rates * slope, g_dm], axis=1))
            M = self.n_memory
            return g_in[:, 1:1 + S2].reshape(Pf.shape), g_in[:, 1 + S2:1 + S2 + M]

        return softplus(raw), out[:, q:], vjp


class ConstantRateModel(KolmogorovModel):
    """Time-homogeneous rates injected directly, bypassing any network.

    ``rates`` are in the data's original time units, ordered like
    ``topology.edges``. Useful as a closed-form oracle.
    """

    def __init__(self, topology: TransitionTopology, rates, n_covariates: int = 0, time_scale: float = 1.0):
        self.topology = topology
        self.n_memory = 0
        self.n_covariates = int(n_covariates)
        self.time_scale = float(time_scale)
        rates = np.asarray(rates, dtype=np.float64).reshape(-1)
        if rates.size != topology.q_count:
            raise ValueError(f"need {topology.q_count} rates, got {rates.size}")
        self.rates = rates
        self.params = None

    def initial_memory(self, x, train=False, rng=None, need_vjp=False):
        B = np.atleast_2d(x).shape[0]
        m0 = np.zeros((B, 0))
        if need_vjp:
            return m0, lambda g: np.zeros((B, self.n_covariates))
        return m0

    def rates_memory(self, tau, Pf, m, x, need_vjp=False):
        B = Pf.shape[0]
        rates = np.broadcast_to(self.rates / self.time_scale, (B, self.rates.size)).copy()
        dm = np.zeros((B, 0))
        if not need_vjp:
            return rates, dm
        return rates, dm, lambda g_rates, g_dm: (np.zeros_like(Pf), np.zeros((B, 0)))


# ------------------------------------------------------------------ prediction

def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.n_covariates:
        raise ValueError(f"covariate dimension {x.shape[1]} != {model.n_covariates}")
    return x


def build_ode_system(model: KolmogorovModel, x, m0=None) -> tuple[OdeSystem, np.ndarray]:
    """Batched system in scaled time and its initial state ``(I, I, m0)``."""
    x = _as_batch(model, x)
    if m0 is None:
        m0 = model.initial_memory(x)
    y0 = model.initial_state(m0)
    B = x.shape[0]
    S2 = model.n_states ** 2

    def rhs(tau, y):
        return model.field(np.full(B, tau), y, x)

    def rhs_vjp(tau, y):
        return model.field(np.full(B, tau), y, x, need_vjp=True)

    blocks = {"P_fwd": slice(0, S2), "P_bwd": slice(S2, 2 * S2), "memory": slice(2 * S2, None)}
    return OdeSystem(model.state_dim, rhs, rhs_vjp, blocks), y0


def solve_states(model, x, times, cfg: SolveConfig | None = None, m0=None) -> np.ndarray:
    """States (len(times), B, D) at original-unit ``times`` (sorted, >= 0)."""
    cfg = cfg or PREDICT_CFG
    times = np.asarray(times, dtype=np.float64)
    if times.size and times.min() < 0:
        raise ValueError("times must be nonnegative")
    sys, y0 = build_ode_system(model, x, m0)
    taus = times * model.time_scale
    order = np.argsort(taus, kind="stable")
    run = SolveConfig(method=cfg.method, abs_tol=cfg.abs_tol, rel_tol=cfg.rel_tol,
                      step_count=cfg.step_count, step_size=cfg.step_size, save_at=taus[order],
                      max_steps=cfg.max_steps)
    out = solve(sys, y0, (0.0, float(taus.max()) if taus.size else 0.0), run)
    res = np.empty_like(out)
    res[order] = out
    return res


def occupation(model, x, grid, cfg: SolveConfig | None = None, m0=None) -> np.ndarray:
    """``P(0, t)`` for every subject and grid time, shape (B, len(grid), S, S)."""
    states = solve_states(model, x, grid, cfg, m0)
    Pf, _, _ = model.split(states)
    return np.swapaxes(Pf, 0, 1)


def transition_matrix(model, x, s: float, t: float, cfg: SolveConfig | None = None) -> np.ndarray:
    """``P(s, t) = P(s, 0) P(0, t)`` for one covariate vector."""
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    states = solve_states(model, x, [s, t], cfg)
    _, Pb, _ = model.split(states[0, 0])
    Pf, _, _ = model.split(states[1, 0])
    if s == 0:
        return Pf
    return Pb @ Pf


def hazard_rates(model, x, times, cfg: SolveConfig | None = None) -> np.ndarray:
    """Rate matrices along ``times`` for one covariate vector, (T, S, S), original units."""
    x = _as_batch(model, x)
    if x.shape[0] != 1:
        raise ValueError("hazard_rates takes a single covariate vector")
    times = np.asarray(times, dtype=np.float64)
    states = solve_states(model, x, times, cfg)[:, 0]
    Q = model.generator_matrices(times * model.time_scale, states, np.repeat(x, len(times), axis=0))
    return Q * model.time_scale


def hazard_ratio(model, x, x_ref, times, cfg: SolveConfig | None = None) -> np.ndarray:
    """Elementwise rate ratio ``lambda(x) / lambda(x_ref)`` on the allowed edges, (T, q)."""
    src, dst = model.topology.edges
    a = hazard_rates(model, x, times, cfg)[:, src, dst]
    b = hazard_rates(model, x_ref, times, cfg)[:, src, dst]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(b > 0, a / b, np.nan)


# ------------------------------------------------------------------ batched training solve

def subject_knots(subj: SubjectRecord, t_end: float | None = None) -> tuple[list[float], list[int]]:
    """Knot times ``[0, observation times..., t_end]`` and each observation's knot index."""
    knots = [0.0]
    obs_knot = []
    for t, _ in subj.observations:
        if t > knots[-1]:
            knots.append(float(t))
        obs_knot.append(len(knots) - 1)
    if t_end is not None and t_end > knots[-1]:
        knots.append(float(t_end))
    return knots, obs_knot


@dataclass
class KnotSolution:
    """Batched solve at every subject's knots.

    ``states[k, b]`` is subject ``b``'s state at its knot ``k`` (scaled time
    ``tau[b, k]``); subjects with fewer knots are padded with zero-length
    segments, so their last state repeats.
    """

    model: KolmogorovModel
    x: np.ndarray
    tau: np.ndarray
    states: np.ndarray
    obs_knot: list
    segments: list

    def backward(self, cot_states) -> np.ndarray:
        """Cotangent of the initial state given cotangents of ``states``."""
        model, x = self.model, self.x
        a = cot_states[-1].copy()
        for k in range(len(self.segments) - 1, -1, -1):
            grid, traj, start, width = self.segments[k]
            fv = _warped(model, x, start, width, need_vjp=True)
            for n in range(len(grid) - 2, -1, -1):
                if np.any(a):
                    a = _rk4_step_vjp(fv, grid[n], traj[n], grid[n + 1] - grid[n], a)
            a = a + cot_states[k]
        return a

    def subject_states(self, b: int) -> np.ndarray:
        """States of subject ``b`` at its observation times."""
        return self.states[self.obs_knot[b], b]


def _warped(model, x, start, width, need_vjp=False):
    """Field over local time s in [0, 1] with tau = start + s * width."""
    w = width[:, None]

    def f(s, y):
        return w * model.field(start + s * width, y, x)

    def fv(s, y):
        dy, vjp = model.field(start + s * width, y, x, need_vjp=True)
        return w * dy, lambda cot: vjp(w * cot)

    return fv if need_vjp else f


def batch_solve(model: KolmogorovModel, subjects: Sequence[SubjectRecord], cfg: SolveConfig,
                t_end: float | None = None, m0=None, record: bool = False,
                x=None) -> KnotSolution:
    """Solve all subjects together, saving each at its own observation times.

    Every subject's path is split at its knots (0, its observation times and
    optionally ``t_end``); segment ``k`` of all subjects is integrated jointly
    on a local clock ``s`` in [0, 1]. With rk4, ``cfg.step_count`` fixes the
    steps per segment; otherwise ``cfg.step_size`` (scaled-time units) sets
    the count from the longest segment in the batch. ``record`` keeps the
    step trajectories needed by :meth:`KnotSolution.backward`.
    """
    if x is None:
        x = np.stack([s.covariates for s in subjects])
    x = _as_batch(model, x)
    B = len(subjects)
    all_knots, obs_knot = [], []
    for subj in subjects:
        kn, ok = subject_knots(subj, t_end)
        all_knots.append(kn)
        obs_knot.append(ok)
    K = max(len(k) for k in all_knots)
    tau = np.empty((B, K))
    for b, kn in enumerate(all_knots):
        tau[b, :len(kn)] = kn
        tau[b, len(kn):] = kn[-1]
    tau *= model.time_scale
    if m0 is None:
        m0 = model.initial_memory(x)
    y = model.initial_state(m0)
    states = np.empty((K, B, model.state_dim))
    states[0] = y
    segments = []
    for k in range(K - 1):
        start = tau[:, k].copy()
        width = tau[:, k + 1] - start
        if cfg.method == "rk4":
            if cfg.step_count is not None:
                n = int(cfg.step_count)
            else:
                n = max(2, int(np.ceil(width.max() / cfg.step_size - 1e-9)))
            grid, idx = rk4_grid(0.0, 1.0, np.array([1.0]), SolveConfig(method="rk4", step_count=n))
            out, traj = _rk4_run(_warped(model, x, start, width), y, grid, idx, keep_all=record)
            y = out[0]
            if record:
                segments.append((grid, traj, start, width))
        else:
            sys = OdeSystem(model.state_dim, _warped(model, x, start, width))
            y = solve(sys, y, (0.0, 1.0), SolveConfig(method="dopri5", abs_tol=cfg.abs_tol,
                                                      rel_tol=cfg.rel_tol, save_at=[1.0]))[0]
        states[k + 1] = y
    return KnotSolution(model, x, tau, states, obs_knot, segments)
