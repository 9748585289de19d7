"""Latent-variable extension: the initial memory becomes a Gaussian latent.

A prior network maps covariates to ``p(z | x)`` and a posterior network
maps covariates plus the final observation time to ``q(z | t, x)``; both
are diagonal Gaussians parameterized by mean and log-variance. Training
maximizes the single-sample reparameterized ELBO. Prediction samples the
prior and pushes every draw through the Kolmogorov system.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Mlp, ParamVector
from .likelihood import LossBreakdown, TrainConfig, batch_loss, fit, init_rate_bias
from .odeint import IntegrationError, SolveConfig
from .statespace import Dataset, SubjectRecord, TransitionTopology
from .survnode import PREDICT_CFG, SurvNodeModel, occupation

log = logging.getLogger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


def kl_diag_gauss(mu_q, logvar_q, mu_p, logvar_p) -> np.ndarray:
    """``KL(q || p)`` between diagonal Gaussians, summed over the last axis."""
    mu_q, logvar_q, mu_p, logvar_p = (np.asarray(a, dtype=np.float64) for a in (mu_q, logvar_q, mu_p, logvar_p))
    var_ratio = np.exp(logvar_q - logvar_p)
    d2 = (mu_q - mu_p) ** 2 * np.exp(-logvar_p)
    return 0.5 * np.sum(logvar_p - logvar_q + var_ratio + d2 - 1.0, axis=-1)


def _kl_grads(mu_q, lv_q, mu_p, lv_p):
    inv_p = np.exp(-lv_p)
    diff = mu_q - mu_p
    g_mu_q = diff * inv_p
    g_lv_q = 0.5 * (np.exp(lv_q - lv_p) - 1.0)
    g_lv_p = 0.5 * (1.0 - (np.exp(lv_q) + diff ** 2) * inv_p)
    return g_mu_q, g_lv_q, -g_mu_q, g_lv_p


def _split_gauss(out, M):
    """Mean and clipped log-variance, plus the clip mask for the gradient."""
    raw = out[:, M:]
    inside = (raw > LOGVAR_MIN) & (raw < LOGVAR_MAX)
    return out[:, :M], np.clip(raw, LOGVAR_MIN, LOGVAR_MAX), inside


class VariationalModel(SurvNodeModel):
    """SurvNODE whose initial memory ``z`` is drawn from a learned Gaussian.

    The point prediction uses the prior mean as ``m(0)``.
    """

    def __init__(self, topology: TransitionTopology, n_covariates: int, n_latent: int = 20,
                 encoder_layers: Sequence[int] = (800, 800), dynamics_layers: Sequence[int] = (1000, 1000, 1000),
                 encoder_dropout: float = 0.0, time_scale: float = 1.0, beta: float = 1.0,
                 seed: int | None = 0):
        if n_latent < 1:
            raise ValueError("need at least one latent dimension")
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        rng = np.random.default_rng(seed)
        self.topology = topology
        self.n_covariates = int(n_covariates)
        self.n_memory = int(n_latent)
        self.time_scale = float(time_scale)
        self.beta = float(beta)
        S, M, d = topology.n_states, self.n_memory, self.n_covariates
        self.prior = Mlp([d, *encoder_layers, 2 * M], rng, dropout=encoder_dropout)
        self.posterior = Mlp([d + 1, *encoder_layers, 2 * M], rng, dropout=encoder_dropout)
        self.dynamics = Mlp([1 + S * S + M + d, *dynamics_layers, topology.q_count + M], rng)
        self.encoder = self.prior
        self.params = ParamVector([self.prior, self.posterior, self.dynamics])

    def architecture(self) -> dict:
        arch = super().architecture()
        arch.update(kind="variational", beta=self.beta)
        return arch

    def prior_params(self, x, train=False, rng=None, need_vjp=False):
        out = self.prior.forward(np.atleast_2d(x), train=train, rng=rng, need_vjp=need_vjp)
        if need_vjp:
            out, vjp = out
            return _split_gauss(out, self.n_memory), vjp
        return _split_gauss(out, self.n_memory)

    def posterior_params(self, x, t_final, train=False, rng=None, need_vjp=False):
        x = np.atleast_2d(x)
        inp = np.concatenate([x, np.reshape(t_final, (-1, 1)) * self.time_scale], axis=1)
        out = self.posterior.forward(inp, train=train, rng=rng, need_vjp=need_vjp)
        if need_vjp:
            out, vjp = out
            return _split_gauss(out, self.n_memory), vjp
        return _split_gauss(out, self.n_memory)

    def initial_memory(self, x, train=False, rng=None, need_vjp=False):
        M = self.n_memory
        if not need_vjp:
            return self.prior_params(x, train, rng)[0]
        (mu, _, _), vjp = self.prior_params(x, train, rng, need_vjp=True)

        def back(g):
            return vjp(np.concatenate([g, np.zeros((g.shape[0], M))], axis=1))

        return mu, back


def elbo_loss(model: VariationalModel, subjects: Sequence[SubjectRecord], cfg: SolveConfig, rng,
              mu: float = 0.0, train: bool = False, need_grad: bool = False,
              eps=None) -> LossBreakdown:
    """Batch mean of ``nll(z) + beta * KL`` with one reparameterized draw per subject.

    The returned breakdown's ``nll`` holds the negative ELBO (the
    regularizer stays in ``lyapunov``); ``per_subject`` holds the negative
    ELBO of each subject. ``eps`` fixes the standard-normal noise.
    """
    subjects = list(subjects)
    B, M = len(subjects), model.n_memory
    x = np.stack([s.covariates for s in subjects])
    t_fin = np.array([s.final_time for s in subjects])
    if need_grad:
        (mu_p, lv_p, in_p), vjp_p = model.prior_params(x, train, rng, need_vjp=True)
        (mu_q, lv_q, in_q), vjp_q = model.posterior_params(x, t_fin, train, rng, need_vjp=True)
    else:
        mu_p, lv_p, in_p = model.prior_params(x, train, rng)
        mu_q, lv_q, in_q = model.posterior_params(x, t_fin, train, rng)
    if eps is None:
        eps = rng.standard_normal((B, M))
    sigma_q = np.exp(0.5 * lv_q)
    z = mu_q + sigma_q * eps
    kl = kl_diag_gauss(mu_q, lv_q, mu_p, lv_p)
    holder = {}

    def z_vjp(gz):
        holder["gz"] = gz

    res = batch_loss(model, subjects, cfg, mu=mu, train=train, rng=rng, need_grad=need_grad,
                     m0=z, m0_vjp=z_vjp if need_grad else None)
    beta = model.beta
    if need_grad:
        gz = holder["gz"]
        gmq, glq, gmp, glp = _kl_grads(mu_q, lv_q, mu_p, lv_p)
        w = beta / B
        g_mu_q = gz + w * gmq
        g_lv_q = (gz * 0.5 * sigma_q * eps + w * glq) * in_q
        vjp_q(np.concatenate([g_mu_q, g_lv_q], axis=1))
        vjp_p(np.concatenate([w * gmp, w * glp * in_p], axis=1))
    per = res.per_subject + beta * kl
    return LossBreakdown(float(per.mean()), res.lyapunov, res.mu, per, res.clamped)


def elbo(model: VariationalModel, subj: SubjectRecord, cfg: SolveConfig | None = None, rng=None,
         eps=None) -> float:
    """Single-sample ELBO of one subject (original time units)."""
    rng = np.random.default_rng() if rng is None else rng
    return -elbo_loss(model, [subj], cfg or PREDICT_CFG, rng, eps=eps).per_subject[0]


def build_variational(cfg: TrainConfig, train: Dataset, beta: float = 1.0,
                      init_rates: bool = True) -> VariationalModel:
    model = VariationalModel(
        train.topology, train.n_covariates, n_latent=cfg.n_memory,
        encoder_layers=[cfg.encoder_width] * cfg.encoder_layers,
        dynamics_layers=[cfg.dynamics_width] * cfg.dynamics_layers,
        encoder_dropout=cfg.encoder_dropout, time_scale=cfg.time_max / train.max_time(),
        beta=beta, seed=cfg.seed)
    if init_rates:
        init_rate_bias(model, train)
    return model


def fit_variational(model: VariationalModel, train: Dataset, valid: Dataset, cfg: TrainConfig,
                    start_epoch: int = 0, on_epoch=None):
    """Train on the negative ELBO; early stopping uses a fixed-noise validation ELBO."""
    solve_cfg = cfg.solve_config()

    def loss_fn(batch, rng):
        return elbo_loss(model, batch, solve_cfg, rng, mu=cfg.mu, train=True, need_grad=True)

    def valid_fn():
        rng = np.random.default_rng([cfg.seed, 7919])
        total, clamped = 0.0, 0
        for start in range(0, len(valid), cfg.eval_batch_size):
            chunk = valid.subjects[start:start + cfg.eval_batch_size]
            res = elbo_loss(model, chunk, solve_cfg, rng)
            total += res.per_subject.sum()
            clamped += res.clamped
        return total / len(valid), clamped

    return fit(model, train, valid, cfg, start_epoch=start_epoch, loss_fn=loss_fn,
               valid_fn=valid_fn, on_epoch=on_epoch)


@dataclass
class IntervalPrediction:
    """Pointwise mean and credible band of occupation, each (n, G, S)."""

    times: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: float
    n_draws: int
    n_dropped: int


def sample_occupation(model: VariationalModel, x, times, n_samples: int, seed: int = 0,
                      initial_state: int = 0, cfg: SolveConfig | None = None):
    """Occupation draws (n_ok, n, G, S) from the prior, and the dropped count."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu_p, lv_p, _ = model.prior_params(x)
    sd = np.exp(0.5 * lv_p)
    draws, dropped = [], 0
    for d in range(n_samples):
        # counter-based stream per draw: independent of evaluation order
        eps = np.random.default_rng([seed, d]).standard_normal(mu_p.shape)
        try:
            P = occupation(model, x, times, cfg or PREDICT_CFG, m0=mu_p + sd * eps)
        except IntegrationError as exc:
            dropped += 1
            log.warning("prior draw %d dropped: %s", d, exc)
            continue
        draws.append(P[:, :, initial_state, :])
    if dropped > 0.2 * n_samples:
        raise IntegrationError(f"{dropped}/{n_samples} prior draws failed", float("nan"))
    return np.stack(draws), dropped


def predict_interval(model: VariationalModel, x, times, n_samples: int = 200, level: float = 0.95,
                     seed: int = 0, initial_state: int = 0, cfg: SolveConfig | None = None) -> IntervalPrediction:
    """Mean and empirical-quantile credible band of ``P(0, t)`` under the prior."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    times = np.asarray(times, dtype=np.float64)
    draws, dropped = sample_occupation(model, x, times, n_samples, seed, initial_state, cfg)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
    return IntervalPrediction(times, draws.mean(axis=0), lo, hi, level, len(draws), dropped)


def bands_from_draws(draws, level: float):
    a = (1.0 - level) / 2.0
    return np.quantile(draws, [a, 1.0 - a], axis=0)


# ------------------------------------------------------------------ latent export

def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(X, centers, max_iter=300, tol=1e-10):
    for _ in range(max_iter):
        dist = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        new = centers.copy()
        for j in range(centers.shape[0]):
            sel = labels == j
            if sel.any():
                new[j] = X[sel].mean(axis=0)
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift <= tol:
            break
    dist = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dist, axis=1)
    return labels, centers, float(dist[np.arange(len(X)), labels].sum())


def kmeans(X, k: int, n_init: int = 20, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts.

    Labels are renumbered so cluster 0 is the largest (ties broken by the
    first member's position).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > X.shape[0]:
        raise ValueError(f"k={k} exceeds the number of points {X.shape[0]}")
    best = None
    for r in range(n_init):
        rng = np.random.default_rng([seed, r])
        labels, centers, inertia = _lloyd(X, _kmeans_pp(X, k, rng))
        if best is None or inertia < best[2] - 1e-12:
            best = (labels, centers, inertia)
    labels, centers, _ = best
    sizes = np.bincount(labels, minlength=k)
    first = np.array([np.flatnonzero(labels == j)[0] if sizes[j] else len(X) for j in range(k)])
    order = sorted(range(k), key=lambda j: (-sizes[j], first[j]))
    remap = np.empty(k, dtype=np.intp)
    remap[order] = np.arange(k)
    return remap[labels], centers[order]


@dataclass
class LatentExport:
    subject_ids: list
    means: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray


def export_latent(model: VariationalModel, ds: Dataset, k: int, seed: int = 0) -> LatentExport:
    """Prior means ``mu_p(x)`` of every subject and their k-means labels."""
    if k > len(ds):
        raise ValueError(f"k={k} exceeds the number of subjects {len(ds)}")
    mu, _, _ = model.prior_params(ds.covariate_matrix())
    labels, centroids = kmeans(mu, k, seed=seed)
    ids = [s.subject_id or str(i + 1) for i, s in enumerate(ds.subjects)]
    return LatentExport(ids, mu, labels, centroids)
