"""Initial value problem integrators.

``dopri5`` is the adaptive Dormand-Prince 5(4) pair used for prediction.
``rk4`` is the classical fixed-step scheme; it is the differentiable path:
:func:`solve_with_grad` returns the exact gradient of the discretized
trajectory by replaying each step backwards (one step of stage activations
is held in memory at a time).

Both methods end a step exactly on every save point instead of
interpolating.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when a solve cannot continue; ``t`` is the time reached."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t


@dataclass
class OdeSystem:
    """Right-hand side ``rhs(t, y)`` of ``dy/dt``.

    ``rhs_vjp(t, y)`` returns ``(dy, vjp)`` where ``vjp(cot)`` gives the
    cotangent of ``y`` and accumulates parameter gradients as a side effect.
    ``blocks`` names slices of the last state axis.
    """

    state_dim: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    rhs_vjp: Callable | None = None
    blocks: dict = field(default_factory=dict)


@dataclass
class SolveConfig:
    method: str = "dopri5"
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    step_count: int | None = None
    step_size: float | None = None
    save_at: Sequence[float] = ()
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in ("dopri5", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.method == "rk4" and self.step_count is None and self.step_size is None:
            raise ValueError("rk4 needs step_count or step_size")
        save = np.asarray(self.save_at, dtype=np.float64)
        if save.size and np.any(np.diff(save) < 0):
            raise ValueError("save_at must be sorted")
        self.save_at = save


def _check_span(span, save):
    t0, t1 = float(span[0]), float(span[1])
    if t1 < t0:
        raise ValueError("span must be increasing")
    if save.size and (save[0] < t0 - 1e-12 * max(1.0, abs(t0)) or save[-1] > t1 + 1e-12 * max(1.0, abs(t1))):
        raise ValueError("save_at must lie within the integration span")
    return t0, t1


def solve(sys: OdeSystem, y0, span, cfg: SolveConfig) -> np.ndarray:
    """Integrate from ``span[0]`` and return the states at ``cfg.save_at``.

    The result has shape ``(len(save_at),) + y0.shape``.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    save = cfg.save_at if len(cfg.save_at) else np.array([float(span[1])])
    t0, t1 = _check_span(span, save)
    if cfg.method == "rk4":
        grid, save_idx = rk4_grid(t0, t1, save, cfg)
        return _rk4_run(sys.rhs, y0, grid, save_idx)[0]
    return _dopri5(sys.rhs, y0, t0, save, cfg)


# ---------------------------------------------------------------- rk4

def rk4_grid(t0, t1, save, cfg: SolveConfig):
    """Uniform step grid over ``[t0, t1]`` merged with the save points.

    Returns the grid and, for every save point, its node index.
    """
    span = t1 - t0
    if cfg.step_count is not None:
        n = int(cfg.step_count)
    else:
        n = max(1, int(math.ceil(span / cfg.step_size - 1e-9)))
    if n < 1:
        raise ValueError("rk4 needs at least one step")
    base = t0 + span * np.arange(n + 1) / n
    base[-1] = t1
    snap = 1e-12 * max(1.0, abs(t0), abs(t1))
    nodes = list(base)
    for s in save:
        j = int(np.argmin(np.abs(base - s)))
        if abs(base[j] - s) > snap:
            nodes.append(float(s))
    grid = np.unique(np.asarray(nodes))
    # merge near-duplicates introduced by the union
    keep = np.concatenate([[True], np.diff(grid) > snap])
    grid = grid[keep]
    save_idx = np.array([int(np.argmin(np.abs(grid - s))) for s in save], dtype=np.intp)
    return grid, save_idx


def rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + (0.5 * h) * k1)
    k3 = f(t + 0.5 * h, y + (0.5 * h) * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_run(f, y0, grid, save_idx, keep_all=False):
    out = np.empty((len(save_idx),) + y0.shape)
    hits = {}
    for k, j in enumerate(save_idx):
        hits.setdefault(int(j), []).append(k)
    traj = [y0] if keep_all else None
    y = y0
    for k in hits.get(0, ()):
        out[k] = y
    for n in range(len(grid) - 1):
        y = rk4_step(f, grid[n], y, grid[n + 1] - grid[n])
        if not np.all(np.isfinite(y)):
            raise IntegrationError("non-finite state", float(grid[n + 1]))
        if keep_all:
            traj.append(y)
        for k in hits.get(n + 1, ()):
            out[k] = y
    return out, traj


def _rk4_step_vjp(fv, t, y, h, a):
    """Cotangent of ``y`` for one rk4 step given cotangent ``a`` of its output."""
    k1, v1 = fv(t, y)
    k2, v2 = fv(t + 0.5 * h, y + (0.5 * h) * k1)
    k3, v3 = fv(t + 0.5 * h, y + (0.5 * h) * k2)
    _, v4 = fv(t + h, y + h * k3)
    dk4 = (h / 6.0) * a
    dk3 = (h / 3.0) * a
    dk2 = (h / 3.0) * a
    dk1 = (h / 6.0) * a
    gy = a.copy()
    g = v4(dk4)
    gy += g
    dk3 = dk3 + h * g
    g = v3(dk3)
    gy += g
    dk2 = dk2 + (0.5 * h) * g
    g = v2(dk2)
    gy += g
    dk1 = dk1 + (0.5 * h) * g
    gy += v1(dk1)
    return gy


def solve_with_grad(sys: OdeSystem, y0, span, cfg: SolveConfig, cotangents):
    """Fixed-step rk4 solve followed by reverse-mode differentiation.

    ``cotangents`` is either an array shaped like the saved states, or a
    callable ``states -> (loss, cotangent_array)``. Parameter gradients
    accumulate through ``sys.rhs_vjp``. Returns ``(states, grad_y0, loss)``;
    ``loss`` is None when plain cotangents were given.
    """
    if cfg.method != "rk4":
        raise ValueError("solve_with_grad needs the rk4 method")
    if sys.rhs_vjp is None:
        raise ValueError("system has no rhs_vjp")
    y0 = np.asarray(y0, dtype=np.float64)
    save = cfg.save_at if len(cfg.save_at) else np.array([float(span[1])])
    t0, t1 = _check_span(span, save)
    grid, save_idx = rk4_grid(t0, t1, save, cfg)
    states, traj = _rk4_run(sys.rhs, y0, grid, save_idx, keep_all=True)
    loss = None
    if callable(cotangents):
        loss, cot = cotangents(states)
    else:
        cot = cotangents
    cot = np.asarray(cot, dtype=np.float64)
    if cot.shape != states.shape:
        raise ValueError(f"cotangent shape {cot.shape} != saved state shape {states.shape}")
    inject = {}
    for k, j in enumerate(save_idx):
        inject.setdefault(int(j), []).append(k)
    a = np.zeros_like(y0)
    last = len(grid) - 1
    for k in inject.get(last, ()):
        a = a + cot[k]
    for n in range(last - 1, -1, -1):
        if np.any(a):
            a = _rk4_step_vjp(sys.rhs_vjp, grid[n], traj[n], grid[n + 1] - grid[n], a)
        for k in inject.get(n, ()):
            a = a + cot[k]
    return states, a, loss


# ---------------------------------------------------------------- dopri5

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _initial_step(f, t0, y0, f0, atol, rtol, span):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * f0
    f1 = f(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, span)


def _dopri5(f, y0, t0, save, cfg: SolveConfig):
    atol, rtol = cfg.abs_tol, cfg.rel_tol
    out = np.empty((len(save),) + y0.shape)
    t = t0
    y = y0.copy()
    k = 0
    while k < len(save) and save[k] <= t:
        out[k] = y
        k += 1
    if k == len(save):
        return out
    f0 = f(t, y)
    h = _initial_step(f, t, y, f0, atol, rtol, save[-1] - t0)
    steps = 0
    while k < len(save):
        target = save[k]
        if steps >= cfg.max_steps:
            raise IntegrationError("maximum step count exceeded", t)
        if h < 1e-14 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t)
        landing = t + h >= target - 1e-14 * max(1.0, abs(target))
        hs = target - t if landing else h
        ks = [f0]
        for i in range(1, 7):
            yi = y.copy()
            for j, a in enumerate(_A[i]):
                if a:
                    yi += (hs * a) * ks[j]
            ks.append(f(t + _C[i] * hs, yi) if i < 6 else None)
            if i == 6:
                y_new = yi
                ks[6] = f(t + hs, y_new)
        err = hs * sum(e * kk for e, kk in zip(_E, ks) if e)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = float(np.max(np.abs(err) / scale)) if err.size else 0.0
        if not np.isfinite(ratio):
            h = 0.25 * hs
            steps += 1
            continue
        if ratio <= 1.0:
            t = target if landing else t + hs
            y = y_new
            f0 = ks[6]
            while k < len(save) and save[k] <= t:
                out[k] = y
                k += 1
            factor = 10.0 if ratio == 0 else min(10.0, 0.9 * ratio ** -0.2)
            # a clipped landing step says nothing about the natural step size
            h = max(h, hs * factor) if landing else hs * factor
        else:
            h = hs * max(0.2, 0.9 * ratio ** -0.2)
        steps += 1
    return out
