"""Compiled versus numpy kernels, plus one end-to-end loss-and-gradient pass.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``. Prints a
table of best-of-N wall times per backend and the speedup.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from kolmo import kernels
from kolmo.likelihood import batch_loss
from kolmo.odeint import SolveConfig
from kolmo.statespace import SubjectRecord, illness_death
from kolmo.survnode import SurvNodeModel


def _cases(rng):
    B, S = 512, 3
    src, dst = np.array([0, 0, 1]), np.array([1, 2, 2])
    rates = rng.random((B, 3))
    Q = kernels.generator(rates, src, dst, S)
    Pf = rng.random((B, S, S))
    Pb = rng.random((B, S, S))
    cf, cb = rng.random((B, S, S)), rng.random((B, S, S))
    gQ = rng.random((B, S, S))
    n, E = 2000, 1200
    surv = rng.random((E, n))
    event_subject = rng.choice(n, E, replace=False)
    times = rng.exponential(size=n)

    subjects = []
    for i in range(256):
        x = rng.normal(size=12)
        t = np.sort(rng.random(2))
        obs = [(0.0, 0), (t[0], 1), (t[1], 2)] if i % 2 else [(0.0, 0), (t[1], 2)]
        subjects.append(SubjectRecord(x, obs, True))
    model = SurvNodeModel(illness_death(), 12, n_memory=8, encoder_layers=(32,), dynamics_layers=(64, 64), seed=0)
    cfg = SolveConfig(method="rk4", step_size=1 / 16)

    return {
        "generator": lambda: kernels.generator(rates, src, dst, S),
        "generator_vjp": lambda: kernels.generator_vjp(gQ, src, dst),
        "kfe_kbe": lambda: kernels.kfe_kbe(Pf, Pb, Q),
        "kfe_kbe_vjp": lambda: kernels.kfe_kbe_vjp(Pf, Pb, Q, cf, cb),
        "concordance_counts": lambda: kernels.concordance_counts(surv, event_subject, times),
        "loss+grad (256 subj)": lambda: batch_loss(model, subjects, cfg, mu=1e-4, need_grad=True),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled extension not built; only the numpy backend is available")
        backends = ["python"]
    else:
        backends = ["cython", "python"]
    results = {}
    for name in backends:
        kernels.use_backend(name)
        cases = _cases(np.random.default_rng(0))
        for label, fn in cases.items():
            number = 1 if label.startswith("loss") else 20
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            results[(label, name)] = best
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for label in cases:
        row = f"{label:<24}" + "".join(f"{results[(label, b)] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) == 2:
            row += f"   {results[(label, 'python')] / results[(label, 'cython')]:7.2f}x"
        print(row)


if __name__ == "__main__":
    main()
