"""Command-line entry point: ``kolmo <verb> --config run.json [--seed N] [--threads N] [--out DIR]``.

Settings resolve in this order, later winning: config file, ``KOLMO_*``
environment variables, command-line flags. Recognized variables are
``KOLMO_CONFIG``, ``KOLMO_SEED``, ``KOLMO_THREADS``, ``KOLMO_OUT`` and
``KOLMO_LOG_LEVEL`` (plus ``KOLMO_PURE_PYTHON=1`` to skip the compiled
kernels and ``KOLMO_METABRIC_CSV`` for the benchmark data).

Exit codes: 0 success, 2 validation failure, 3 numerical failure, 4 I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .likelihood import TrainingAborted
from .odeint import IntegrationError
from .simulate import ThinningBoundError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

VERBS = {
    "simulate": pipeline.run_simulate,
    "fit": pipeline.run_fit,
    "fit-variational": lambda cfg, out, seed: pipeline.run_fit(cfg, out, seed, variational=True),
    "predict": pipeline.run_predict,
    "evaluate": pipeline.run_evaluate,
    "latent": pipeline.run_latent,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kolmo", description="Neural Kolmogorov multi-state survival models")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--threads", type=int, help="worker thread bound (default 1)")
    p.add_argument("--out", help="output directory (default: the config's 'out' or ./out)")
    return p


def _env_int(name):
    v = os.environ.get(name)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError as exc:
        raise pipeline.ConfigError(f"{name} must be an integer, got {v!r}") from exc


def resolve(args) -> tuple[dict, str, int | None, int]:
    path = args.config or os.environ.get("KOLMO_CONFIG")
    cfg = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise pipeline.ConfigError("config must be a JSON object")
    # a config echoed by an earlier run names its verb; accept it back
    echoed = cfg.pop("command", args.verb)
    if echoed != args.verb:
        raise pipeline.ConfigError(f"config was written by {echoed!r}, not {args.verb!r}")
    out = cfg.pop("out", None)
    out = args.out or os.environ.get("KOLMO_OUT") or out or "out"
    seed = args.seed if args.seed is not None else _env_int("KOLMO_SEED")
    threads = args.threads if args.threads is not None else (_env_int("KOLMO_THREADS") or 1)
    if threads < 1:
        raise pipeline.ConfigError("--threads must be at least 1")
    return cfg, out, seed, threads


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("KOLMO_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out, seed, threads = resolve(args)
        with threadpool_limits(limits=threads):
            summary = VERBS[args.verb](cfg, out, seed)
    except (IntegrationError, TrainingAborted, ThinningBoundError, FloatingPointError) as exc:
        print(f"kolmo {args.verb}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"kolmo {args.verb}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"kolmo {args.verb}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    summary = {k: v for k, v in summary.items() if k != "model"}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
