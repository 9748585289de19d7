"""Censored multi-state likelihood, memory regularizer and training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .diffcore import adam_step
from .nonparam import occurrence_exposure
from .odeint import IntegrationError, SolveConfig
from .statespace import EXACT, INTERVAL, Dataset, SubjectRecord
from .survnode import PREDICT_CFG, KnotSolution, KolmogorovModel, SurvNodeModel, batch_solve

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the population-comparison block.

    ``encoder_layers``/``encoder_width`` are L_e/N_e, ``dynamics_layers``/
    ``dynamics_width`` are L_Q/N_Q, ``n_memory`` is M, ``mu`` weighs the
    memory regularizer, ``time_max`` is the value the largest training time
    is scaled to. ``rk4_steps`` counts fixed rk4 steps per unit of scaled
    time on the training path.
    """

    encoder_layers: int = 2
    encoder_width: int = 800
    encoder_dropout: float = 0.0
    dynamics_layers: int = 3
    dynamics_width: int = 1000
    n_memory: int = 20
    mu: float = 1e-4
    time_max: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 1e-7
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    rk4_steps: int = 64
    eval_batch_size: int = 1024

    def __post_init__(self):
        for name in ("encoder_layers", "dynamics_layers", "encoder_width", "dynamics_width",
                     "n_memory", "batch_size", "max_epochs", "rk4_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.time_max <= 0:
            raise ValueError("time_max must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def solve_config(self) -> SolveConfig:
        return SolveConfig(method="rk4", step_size=1.0 / self.rk4_steps)


def init_rate_bias(model: KolmogorovModel, train: Dataset, floor: float = 1e-3):
    """Start the rate head at the crude occurrence/exposure rates.

    Only the output bias moves; the random output weights still let the
    initial rates vary with the inputs.
    """
    crude = occurrence_exposure(train) / model.time_scale
    crude = np.maximum(crude, floor * max(crude.max(), 1.0))
    q = model.topology.q_count
    # inverse softplus
    model.dynamics.biases[-1][:q] = crude + np.log(-np.expm1(-crude))


def build_model(cfg: TrainConfig, train: Dataset, init_rates: bool = True) -> SurvNodeModel:
    model = SurvNodeModel(
        train.topology, train.n_covariates, n_memory=cfg.n_memory,
        encoder_layers=[cfg.encoder_width] * cfg.encoder_layers,
        dynamics_layers=[cfg.dynamics_width] * cfg.dynamics_layers,
        encoder_dropout=cfg.encoder_dropout,
        time_scale=cfg.time_max / train.max_time(), seed=cfg.seed)
    if init_rates:
        init_rate_bias(model, train)
    return model


@dataclass
class LossBreakdown:
    nll: float
    lyapunov: float
    mu: float
    per_subject: np.ndarray
    clamped: int = 0

    @property
    def total(self) -> float:
        return self.nll + self.mu * self.lyapunov


@dataclass
class _Terms:
    """Flattened likelihood factors of a batch."""

    # probability factors P_{row,col}(t_prev, t_next) from Pb(knot_prev) @ Pf(knot_next)
    p_subj: np.ndarray
    p_prev: np.ndarray
    p_next: np.ndarray
    p_row: np.ndarray
    p_col: np.ndarray
    # hazard factors lambda_{edge}(t) at knot r_knot
    r_subj: np.ndarray
    r_knot: np.ndarray
    r_edge: np.ndarray


def _collect_terms(model: KolmogorovModel, subjects: Sequence[SubjectRecord], obs_knot) -> _Terms:
    topo = model.topology
    P = [[] for _ in range(5)]
    R = [[] for _ in range(3)]
    for b, subj in enumerate(subjects):
        obs = subj.observations
        knots = obs_knot[b]
        m = len(obs)
        for j in range(1, m):
            a, c = obs[j - 1][1], obs[j][1]
            mode = subj.obs_mode[j - 1]
            final = j == m - 1
            if mode == INTERVAL:
                col = c
            else:
                col = a
            for lst, v in zip(P, (b, knots[j - 1], knots[j], a, col)):
                lst.append(v)
            if mode == EXACT and a != c and (not final or subj.last_observed):
                for lst, v in zip(R, (b, knots[j], topo.edge_index(a, c))):
                    lst.append(v)
    arr = [np.asarray(v, dtype=np.intp) for v in P + R]
    return _Terms(*arr)


def _nll_and_cotangents(model: KolmogorovModel, sol: KnotSolution, terms: _Terms, need_grad: bool,
                        weight: float = 1.0):
    """Per-subject nll and (optionally) cotangents of ``weight * sum(nll)``.

    Parameter gradients of the hazard factors accumulate immediately.
    """
    B = sol.states.shape[1]
    S = model.n_states
    per_subject = np.zeros(B)
    clamped = 0
    cot = np.zeros_like(sol.states) if need_grad else None
    S2 = S * S
    if terms.p_subj.size:
        yp = sol.states[terms.p_prev, terms.p_subj]
        yn = sol.states[terms.p_next, terms.p_subj]
        Pb_rows = yp[:, S2:2 * S2].reshape(-1, S, S)[np.arange(len(yp)), terms.p_row]
        Pf_cols = yn[:, :S2].reshape(-1, S, S)[np.arange(len(yn)), :, terms.p_col]
        p = np.einsum("ij,ij->i", Pb_rows, Pf_cols)
        low = p < LOG_FLOOR
        clamped += int(low.sum())
        np.add.at(per_subject, terms.p_subj, -np.log(np.maximum(p, LOG_FLOOR)))
        if need_grad:
            g = np.where(low, 0.0, -weight / np.where(low, 1.0, p))
            # d p / d Pb[row, k] = Pf[k, col] ; d p / d Pf[k, col] = Pb[row, k]
            for n in range(S):
                np.add.at(cot, (terms.p_prev, terms.p_subj, S2 + terms.p_row * S + n), g * Pf_cols[:, n])
                np.add.at(cot, (terms.p_next, terms.p_subj, n * S + terms.p_col), g * Pb_rows[:, n])
    if terms.r_subj.size:
        y = sol.states[terms.r_knot, terms.r_subj]
        tau = sol.tau[terms.r_subj, terms.r_knot]
        Pf = y[:, :S2].reshape(-1, S, S)
        m = y[:, 2 * S2:]
        x = sol.x[terms.r_subj]
        if need_grad:
            rates, _, vjp = model.rates_memory(tau, Pf, m, x, need_vjp=True)
        else:
            rates, _ = model.rates_memory(tau, Pf, m, x)
        lam = rates[np.arange(len(rates)), terms.r_edge]
        low = lam < LOG_FLOOR
        clamped += int(low.sum())
        # report densities per original time unit
        np.add.at(per_subject, terms.r_subj, -np.log(np.maximum(lam, LOG_FLOOR)) - math.log(model.time_scale))
        if need_grad:
            g_rates = np.zeros_like(rates)
            g_rates[np.arange(len(rates)), terms.r_edge] = np.where(low, 0.0, -weight / np.where(low, 1.0, lam))
            gPf, gm = vjp(g_rates, np.zeros((len(rates), model.n_memory)))
            gy = np.concatenate([gPf.reshape(len(rates), -1), np.zeros((len(rates), S2)), gm], axis=1)
            np.add.at(cot, (terms.r_knot, terms.r_subj), gy)
    return per_subject, clamped, cot


def lyapunov_loss(memory) -> float:
    """Batch mean of ``||m||^2 / M`` for memory states (B, M) at the batch's max time."""
    memory = np.atleast_2d(np.asarray(memory, dtype=np.float64))
    if memory.shape[1] == 0:
        return 0.0
    return float(np.mean(np.sum(memory ** 2, axis=1) / memory.shape[1]))


def batch_loss(model: KolmogorovModel, subjects: Sequence[SubjectRecord], solve_cfg: SolveConfig,
               mu: float = 0.0, train: bool = False, rng=None, need_grad: bool = False,
               m0=None, m0_vjp=None) -> LossBreakdown:
    """Mean nll over ``subjects`` plus ``mu`` times the memory regularizer.

    With ``need_grad`` the gradient of ``total`` is accumulated into
    ``model.params.grad`` (the caller zeroes it). ``m0``/``m0_vjp`` override
    the encoder, which the latent-variable model uses.
    """
    subjects = list(subjects)
    B = len(subjects)
    x = np.stack([s.covariates for s in subjects])
    t_mmb = max(s.final_time for s in subjects)
    if m0 is None:
        if need_grad:
            m0, m0_vjp = model.initial_memory(x, train=train, rng=rng, need_vjp=True)
        else:
            m0 = model.initial_memory(x, train=train, rng=rng)
    sol = batch_solve(model, subjects, solve_cfg, t_end=t_mmb, m0=m0, record=need_grad, x=x)
    terms = _collect_terms(model, subjects, sol.obs_knot)
    per_subject, clamped, cot = _nll_and_cotangents(model, sol, terms, need_grad, weight=1.0 / B)
    S2 = model.n_states ** 2
    mem = sol.states[-1, :, 2 * S2:]
    lyap = lyapunov_loss(mem)
    out = LossBreakdown(float(per_subject.mean()), lyap, mu, per_subject, clamped)
    if need_grad:
        if mu and model.n_memory:
            cot[-1, :, 2 * S2:] += mu * 2.0 * mem / (B * model.n_memory)
        g0 = sol.backward(cot)
        m0_vjp(g0[:, 2 * S2:])
    return out


def subject_nll(model: KolmogorovModel, subj: SubjectRecord, cfg: SolveConfig | None = None) -> float:
    """Negative log-likelihood of one subject (original time units)."""
    cfg = cfg or PREDICT_CFG
    return float(batch_loss(model, [subj], cfg).per_subject[0])


def dataset_nll(model: KolmogorovModel, ds: Dataset, cfg: SolveConfig, batch_size: int = 1024) -> tuple[float, int]:
    """Mean per-subject nll over ``ds`` and the number of clamped logs."""
    total, clamped = 0.0, 0
    for start in range(0, len(ds), batch_size):
        chunk = ds.subjects[start:start + batch_size]
        res = batch_loss(model, chunk, cfg)
        total += res.per_subject.sum()
        clamped += res.clamped
    return total / len(ds), clamped


class TrainingAborted(RuntimeError):
    pass


@dataclass
class FitResult:
    model: KolmogorovModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = math.inf


HISTORY_COLUMNS = ("epoch", "train_nll", "valid_nll", "lyapunov", "clamp_count")


def fit(model: KolmogorovModel, train: Dataset, valid: Dataset, cfg: TrainConfig,
        start_epoch: int = 0, loss_fn: Callable | None = None, valid_fn: Callable | None = None,
        on_epoch: Callable | None = None) -> FitResult:
    """Adam on shuffled mini-batches with early stopping on validation nll.

    Returns the model restored to its best validation epoch. ``loss_fn``
    and ``valid_fn`` replace the batch objective and validation score (used
    by the latent-variable model). Deterministic for a fixed seed.
    """
    params = model.params
    solve_cfg = cfg.solve_config()
    rng = np.random.default_rng([cfg.seed, start_epoch])
    if loss_fn is None:
        def loss_fn(batch, rng):
            return batch_loss(model, batch, solve_cfg, mu=cfg.mu, train=True, rng=rng, need_grad=True)
    if valid_fn is None:
        def valid_fn():
            return dataset_nll(model, valid, solve_cfg, cfg.eval_batch_size)
    result = FitResult(model)
    best_params = params.copy()
    stale = 0
    n = len(train)
    for epoch in range(start_epoch, start_epoch + cfg.max_epochs):
        order = rng.permutation(n)
        sums = {"nll": 0.0, "lyap": 0.0, "clamped": 0, "count": 0}
        failures = n_batches = 0
        for start in range(0, n, cfg.batch_size):
            batch = [train.subjects[i] for i in order[start:start + cfg.batch_size]]
            n_batches += 1
            params.zero_grad()
            try:
                res = loss_fn(batch, rng)
            except IntegrationError as exc:
                failures += 1
                log.warning("epoch %d: batch integration failed: %s", epoch, exc)
                continue
            adam_step(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
            sums["nll"] += res.nll * len(batch)
            sums["lyap"] += res.lyapunov * len(batch)
            sums["clamped"] += res.clamped
            sums["count"] += len(batch)
        if failures * 2 > n_batches:
            raise TrainingAborted(f"epoch {epoch}: integration failed in {failures}/{n_batches} batches")
        valid_nll, valid_clamped = valid_fn()
        row = {
            "epoch": epoch,
            "train_nll": sums["nll"] / max(sums["count"], 1),
            "valid_nll": valid_nll,
            "lyapunov": sums["lyap"] / max(sums["count"], 1),
            "clamp_count": sums["clamped"] + valid_clamped,
        }
        result.history.append(row)
        log.info("epoch %d train %.5f valid %.5f", epoch, row["train_nll"], valid_nll)
        if on_epoch is not None:
            on_epoch(row)
        if np.isfinite(valid_nll) and valid_nll < result.best_valid:
            result.best_valid = valid_nll
            result.best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params.set(best_params)
    return result
