"""End-to-end runs behind the CLI verbs.

Each ``run_*`` function takes a plain config dict (as loaded from JSON),
writes its outputs into ``out`` and returns a small summary dict. Unknown
config keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .diffcore import read_checkpoint, write_checkpoint
from .likelihood import TrainConfig, build_model, fit
from .metrics import (SurvivalCurves, brier_ipcw, brier_vs_truth, concordance_td, ibll, multistate_brier,
                      quantile_grid, time_average)
from .nonparam import aalen_johansen, censoring_km
from .simulate import preset, sample_paths, spec_from_dict, spec_to_dict, split_indices, true_occupation
from .statespace import CovariateStats, Dataset, TransitionTopology, normalize_covariates, validate_dataset
from .survnode import PREDICT_CFG, SurvNodeModel, hazard_rates, hazard_ratio, occupation
from .variational import (VariationalModel, build_variational, export_latent, fit_variational,
                          predict_interval)

log = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.64, 0.16, 0.20)


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


# ---------------------------------------------------------------- data

DATA_KEYS = ("dir", "events", "covariates", "topology", "split", "spec")


def load_data(section: dict):
    """Dataset, split manifest (or None) and simulation spec (or None)."""
    _check_keys(section, DATA_KEYS, "data")
    base = Path(section["dir"]) if "dir" in section else None

    def path(key, default):
        if key in section:
            return Path(section[key])
        return base / default if base is not None else None

    ev, cov, top = path("events", "events.csv"), path("covariates", "covariates.csv"), path("topology", "topology.json")
    for p in (ev, cov, top):
        if p is None or not p.exists():
            raise ConfigError(f"data file not found: {p}")
    ds = io.read_dataset(ev, cov, top)
    problems = validate_dataset(ds)
    if problems:
        raise ConfigError("invalid dataset: " + "; ".join(problems[:5]))
    sp = path("split", "split.json")
    split = io.read_json(sp) if sp is not None and sp.exists() else None
    sc = path("spec", "spec.json")
    spec = spec_from_dict(io.read_json(sc)) if sc is not None and sc.exists() else None
    return ds, split, spec


def split_dataset(ds: Dataset, split: dict | None, seed: int) -> dict:
    """Named subsets from a manifest of subject ids, or a fresh 64/16/20 split."""
    if split is None:
        tr, va, te = split_indices(len(ds), seed, SPLIT_FRACTIONS)
        return {"train": ds.subset(tr), "valid": ds.subset(va), "test": ds.subset(te), "all": ds}
    pos = {s.subject_id: i for i, s in enumerate(ds.subjects)}
    out = {"all": ds}
    for name in ("train", "valid", "test"):
        try:
            out[name] = ds.subset([pos[str(i)] for i in split[name]])
        except KeyError as exc:
            raise ConfigError(f"split manifest names unknown subject {exc}") from exc
    return out


# ---------------------------------------------------------------- checkpoints

def save_model(path, model, train_cfg: TrainConfig, stats: CovariateStats | None, epoch: int,
               extra: dict | None = None, with_optimizer: bool = True):
    header = {
        "format": 1,
        "architecture": model.architecture(),
        "train_config": train_cfg.to_dict(),
        "normalization": stats.to_dict() if stats is not None else None,
        "epoch": epoch,
    }
    header.update(extra or {})
    write_checkpoint(path, header, model.params, with_optimizer)


def load_model(path):
    """Model, header and normalization stats from a checkpoint."""
    header, params, opt = read_checkpoint(path)
    arch = header["architecture"]
    topo = TransitionTopology(np.array(arch["allowed"], dtype=bool))
    common = dict(encoder_layers=arch["encoder_layers"], dynamics_layers=arch["dynamics_layers"],
                  encoder_dropout=arch["encoder_dropout"], time_scale=arch["time_scale"], seed=None)
    if arch["kind"] == "survnode":
        model = SurvNodeModel(topo, arch["n_covariates"], n_memory=arch["n_memory"], **common)
    elif arch["kind"] == "variational":
        model = VariationalModel(topo, arch["n_covariates"], n_latent=arch["n_memory"], beta=arch["beta"], **common)
    else:
        raise ValueError(f"unknown model kind {arch['kind']!r}")
    model.params.set(params)
    if opt is not None:
        model.params.m[...] = opt["m"]
        model.params.v[...] = opt["v"]
        model.params.step = int(opt["step"])
    stats = CovariateStats.from_dict(header["normalization"]) if header.get("normalization") else None
    return model, header, stats


# ---------------------------------------------------------------- simulate

SIM_KEYS = ("preset", "spec", "n_subjects", "censor_fraction", "censor_rate", "seed", "grid_points")


def run_simulate(cfg: dict, out, seed: int | None = None) -> dict:
    _check_keys(cfg, SIM_KEYS, "simulate")
    if ("preset" in cfg) == ("spec" in cfg):
        raise ConfigError("simulate needs exactly one of 'preset' or 'spec'")
    spec = preset(cfg["preset"]) if "preset" in cfg else spec_from_dict(cfg["spec"])
    changes = {k: cfg[k] for k in ("n_subjects", "censor_fraction", "censor_rate") if k in cfg}
    if "censor_rate" in changes:
        changes.setdefault("censor_fraction", None)
    seed = cfg.get("seed", spec.seed) if seed is None else seed
    spec = replace(spec, seed=int(seed), **changes)
    out = io.ensure_dir(out)
    ds = sample_paths(spec)
    io.write_dataset(out, ds)
    tr, va, te = split_indices(len(ds), spec.seed, SPLIT_FRACTIONS)
    ids = [s.subject_id for s in ds.subjects]
    io.write_json(out / "split.json", {"seed": spec.seed, "fractions": list(SPLIT_FRACTIONS),
                                        "train": [ids[i] for i in tr], "valid": [ids[i] for i in va],
                                        "test": [ids[i] for i in te]})
    io.write_json(out / "spec.json", spec_to_dict(spec))
    grid = np.linspace(0.0, spec.horizon, int(cfg.get("grid_points", 51)))
    truth = true_occupation(spec, ds.covariate_matrix(), grid)
    io.write_occupation(out / "ground_truth.csv", ids, grid, truth.occupation, name="p_true")
    io.write_json(out / "config.json", {"command": "simulate", **cfg, "seed": spec.seed})
    censored = float(np.mean([not s.last_observed for s in ds.subjects]))
    return {"n": len(ds), "censored_fraction": censored, "split": [len(tr), len(va), len(te)]}


# ---------------------------------------------------------------- fit

FIT_KEYS = ("data", "train", "normalize", "resume", "variational")


def run_fit(cfg: dict, out, seed: int | None = None, variational: bool = False) -> dict:
    _check_keys(cfg, FIT_KEYS, "fit")
    if "data" not in cfg:
        raise ConfigError("fit needs a 'data' section")
    train_cfg = TrainConfig.from_dict(dict(cfg.get("train", {})))
    if seed is not None:
        train_cfg = replace(train_cfg, seed=int(seed))
    var_cfg = dict(cfg.get("variational", {}))
    _check_keys(var_cfg, ("beta",), "variational")
    ds, split, _ = load_data(cfg["data"])
    parts = split_dataset(ds, split, train_cfg.seed)
    stats = None
    train, valid = parts["train"], parts["valid"]
    start_epoch = 0
    if cfg.get("resume"):
        model, header, stats = load_model(cfg["resume"])
        if model.topology != ds.topology:
            raise ConfigError("checkpoint topology does not match the data")
        start_epoch = int(header["epoch"]) + 1
        if stats is not None:
            train, _ = normalize_covariates(train, stats)
            valid, _ = normalize_covariates(valid, stats)
    else:
        if cfg.get("normalize", True):
            train, stats = normalize_covariates(train)
            valid, _ = normalize_covariates(valid, stats)
        if variational:
            model = build_variational(train_cfg, train, beta=float(var_cfg.get("beta", 1.0)))
        else:
            model = build_model(train_cfg, train)
    out = io.ensure_dir(out)
    if variational:
        res = fit_variational(model, train, valid, train_cfg, start_epoch=start_epoch)
    else:
        res = fit(model, train, valid, train_cfg, start_epoch=start_epoch)
    last = res.history[-1]["epoch"] if res.history else start_epoch - 1
    save_model(out / "model.ckpt", model, train_cfg, stats, last,
               {"best_epoch": res.best_epoch, "best_valid": res.best_valid})
    io.write_history(out / "history.csv", res.history)
    echo = {"command": "fit-variational" if variational else "fit", **cfg, "train": train_cfg.to_dict()}
    io.write_json(out / "config.json", echo)
    return {"epochs": len(res.history), "best_epoch": res.best_epoch, "best_valid": res.best_valid,
            "model": res.model}


# ---------------------------------------------------------------- predict

PREDICT_KEYS = ("checkpoint", "data", "subset", "times", "grid_points", "t_max", "hazards", "hazard_ratio",
                "n_samples", "level", "seed", "batch_size")


def _prepared(model, stats, ds):
    if stats is not None:
        ds, _ = normalize_covariates(ds, stats)
    if ds.n_covariates != model.n_covariates:
        raise ConfigError(f"data has {ds.n_covariates} covariates, model expects {model.n_covariates}")
    if ds.topology != model.topology:
        raise ConfigError("checkpoint topology does not match the data")
    return ds


def predict_occupation(model, ds: Dataset, grid, batch_size: int = 256, cfg=None) -> np.ndarray:
    """Occupation rows of each subject's initial state, (n, G, S)."""
    grid = np.asarray(grid, dtype=np.float64)
    out = np.empty((len(ds), grid.size, model.n_states))
    x = ds.covariate_matrix()
    init = np.array([s.initial_state for s in ds.subjects])
    for a in range(0, len(ds), batch_size):
        P = occupation(model, x[a:a + batch_size], grid, cfg or PREDICT_CFG)
        out[a:a + batch_size] = P[np.arange(P.shape[0]), :, init[a:a + batch_size], :]
    return out


def _select(parts, name):
    if name not in parts:
        raise ConfigError(f"unknown subset {name!r}")
    return parts[name]


def run_predict(cfg: dict, out, seed: int | None = None) -> dict:
    _check_keys(cfg, PREDICT_KEYS, "predict")
    model, header, stats = load_model(cfg["checkpoint"])
    ds, split, _ = load_data(cfg["data"])
    parts = split_dataset(ds, split, header["train_config"]["seed"])
    raw = _select(parts, cfg.get("subset", "test" if split is not None else "all"))
    sub = _prepared(model, stats, raw)
    if "times" in cfg:
        grid = np.asarray(sorted(float(t) for t in cfg["times"]))
    else:
        t_max = float(cfg.get("t_max", raw.max_time()))
        grid = np.linspace(0.0, t_max, int(cfg.get("grid_points", 50)))
    ids = [s.subject_id for s in sub.subjects]
    out = io.ensure_dir(out)
    bs = int(cfg.get("batch_size", 256))
    summary = {"n": len(sub), "grid_points": int(grid.size)}
    if isinstance(model, VariationalModel) and cfg.get("n_samples"):
        bands = predict_interval(model, sub.covariate_matrix(), grid, int(cfg["n_samples"]),
                                 float(cfg.get("level", 0.95)), seed=int(cfg.get("seed", seed or 0)))
        io.write_bands(out / "bands.csv", ids, grid, bands.mean, bands.lo, bands.hi)
        summary["dropped_draws"] = bands.n_dropped
    else:
        occ = predict_occupation(model, sub, grid, bs)
        io.write_occupation(out / "occupation.csv", ids, grid, occ)
        summary["max_row_error"] = float(np.abs(occ.sum(axis=2) - 1.0).max())
    if cfg.get("hazards"):
        src, dst = model.topology.edges
        rows = []
        x = sub.covariate_matrix()
        for i, sid in enumerate(ids):
            Q = hazard_rates(model, x[i], grid)
            for k, t in enumerate(grid):
                for e in range(src.size):
                    rows.append((sid, float(t), f"{src[e] + 1}->{dst[e] + 1}", float(Q[k, src[e], dst[e]])))
        io.write_rows(out / "hazards.csv", ["subject_id", "time", "transition", "rate"], rows)
    if cfg.get("hazard_ratio"):
        rows = _hazard_ratio_rows(model, stats, raw, str(cfg["hazard_ratio"]), grid)
        io.write_rows(out / "hazard_ratio.csv", ["subject_id", "time", "transition", "ratio"], rows)
    io.write_json(out / "config.json", {"command": "predict", **cfg})
    return summary


def _hazard_ratio_rows(model, stats, raw: Dataset, name: str, grid):
    """Rate ratio with a binary covariate set to 1 versus 0, per subject and edge."""
    if name not in raw.covariate_names:
        raise ConfigError(f"unknown covariate {name!r}")
    j = raw.covariate_names.index(name)
    x = raw.covariate_matrix()
    if not np.all(np.isin(x[:, j], (0.0, 1.0))):
        raise ConfigError(f"covariate {name!r} is not binary")
    on, off = x.copy(), x.copy()
    on[:, j], off[:, j] = 1.0, 0.0
    if stats is not None:
        on, off = stats.apply(on), stats.apply(off)
    src, dst = model.topology.edges
    rows = []
    for i, subj in enumerate(raw.subjects):
        ratio = hazard_ratio(model, on[i], off[i], grid)
        for k, t in enumerate(grid):
            for e in range(src.size):
                rows.append((subj.subject_id, float(t), f"{src[e] + 1}->{dst[e] + 1}", float(ratio[k, e])))
    return rows


# ---------------------------------------------------------------- evaluate

EVAL_KEYS = ("checkpoint", "predictions", "data", "subset", "grid_points", "aj_points", "aj_quantile",
             "truth_points", "batch_size")


def evaluate_predictions(ds: Dataset, predict, spec=None, grid_points: int = 100, aj_points: int = 50,
                         aj_quantile: float = 0.9, truth_points: int = 50) -> tuple[dict, list]:
    """All applicable metrics for ``ds``.

    ``predict(grid) -> (n, G, S)`` returns occupation predictions on any
    grid. Returns the scalar summary and long-format curve rows.
    """
    S = ds.topology.n_states
    times, events = ds.exit_data()
    G = censoring_km(times, events)
    summary: dict = {"n": len(ds), "n_states": S}
    curves: list = []
    if events.any():
        qgrid = quantile_grid(times, events, grid_points)
        occ = predict(qgrid.times)
        if S == 2:
            surv = occ[:, :, 0]
            fine = np.union1d(np.linspace(0.0, times.max(), 200), qgrid.times)
            fine_occ = predict(fine)[:, :, 0]
            summary["c"] = concordance_td(SurvivalCurves(fine, fine_occ), times, events)
            bs = brier_ipcw(surv, times, events, G, qgrid)
            summary["ibs"] = bs.integrated
            summary["ibll"] = ibll(surv, times, events, G, qgrid).integrated
            summary["weights_capped"] = bs.n_capped
            curves += [("brier", float(t), 1, float(v)) for t, v in zip(qgrid.times, bs.curve)]
        ms = multistate_brier(occ, ds, G, qgrid)
        summary["multistate_ibs"] = [float(v) for v in ms.integrated]
        curves += [("multistate_brier", float(t), j + 1, float(ms.curve[k, j]))
                   for k, t in enumerate(qgrid.times) for j in range(S)]
    # population mean against Aalen-Johansen up to a quantile of the exit times
    t_hi = float(np.quantile(times, aj_quantile))
    agrid = np.linspace(0.0, t_hi, aj_points)
    aj = aalen_johansen(ds, agrid)
    pop = predict(agrid).mean(axis=0)
    summary["aj_sup_deviation"] = [float(v) for v in np.abs(pop - aj).max(axis=0)]
    curves += [("aj", float(t), j + 1, float(aj[k, j])) for k, t in enumerate(agrid) for j in range(S)]
    curves += [("population_mean", float(t), j + 1, float(pop[k, j])) for k, t in enumerate(agrid) for j in range(S)]
    if spec is not None:
        tgrid = np.linspace(0.0, min(spec.horizon, times.max()), truth_points)
        truth = true_occupation(spec, ds.covariate_matrix(), tgrid)
        bvt = brier_vs_truth(predict(tgrid), truth)
        summary["brier_vs_truth"] = [float(v) for v in time_average(tgrid, bvt)]
        curves += [("brier_vs_truth", float(t), j + 1, float(bvt[k, j])) for k, t in enumerate(tgrid) for j in range(S)]
    return summary, curves


def run_evaluate(cfg: dict, out, seed: int | None = None) -> dict:
    _check_keys(cfg, EVAL_KEYS, "evaluate")
    if ("checkpoint" in cfg) == ("predictions" in cfg):
        raise ConfigError("evaluate needs exactly one of 'checkpoint' or 'predictions'")
    ds, split, spec = load_data(cfg["data"])
    if "checkpoint" in cfg:
        model, header, stats = load_model(cfg["checkpoint"])
        parts = split_dataset(ds, split, header["train_config"]["seed"])
        raw = _select(parts, cfg.get("subset", "test" if split is not None else "all"))
        sub = _prepared(model, stats, raw)
        bs = int(cfg.get("batch_size", 256))

        def predict(grid):
            return predict_occupation(model, sub, grid, bs)
    else:
        ids, pgrid, values = io.read_occupation(cfg["predictions"], _value_column(cfg["predictions"]))
        pos = {s.subject_id: i for i, s in enumerate(ds.subjects)}
        try:
            raw = ds.subset([pos[i] for i in ids])
        except KeyError as exc:
            raise ConfigError(f"predictions name unknown subject {exc}") from exc

        def predict(grid):
            # linear interpolation of the supplied curves, held flat outside
            grid = np.asarray(grid, dtype=np.float64)
            k = np.clip(np.searchsorted(pgrid, grid, side="right") - 1, 0, max(pgrid.size - 2, 0))
            if pgrid.size == 1:
                return np.repeat(values, grid.size, axis=1)
            w = np.clip((grid - pgrid[k]) / (pgrid[k + 1] - pgrid[k]), 0.0, 1.0)[None, :, None]
            return values[:, k] * (1 - w) + values[:, k + 1] * w
    summary, curves = evaluate_predictions(
        raw, predict, spec, int(cfg.get("grid_points", 100)), int(cfg.get("aj_points", 50)),
        float(cfg.get("aj_quantile", 0.9)), int(cfg.get("truth_points", 50)))
    out = io.ensure_dir(out)
    io.write_json(out / "metrics.json", summary)
    io.write_rows(out / "metrics_curves.csv", ["metric", "time", "state", "value"], curves)
    io.write_json(out / "config.json", {"command": "evaluate", **cfg})
    return summary


def _value_column(path):
    header, _ = io.read_rows(path)
    for name in ("p", "p_true", "mean"):
        if name in header:
            return name
    raise ConfigError(f"{path}: no probability column")


# ---------------------------------------------------------------- latent

LATENT_KEYS = ("checkpoint", "data", "subset", "k", "seed")


def run_latent(cfg: dict, out, seed: int | None = None) -> dict:
    _check_keys(cfg, LATENT_KEYS, "latent")
    model, header, stats = load_model(cfg["checkpoint"])
    if not isinstance(model, VariationalModel):
        raise ConfigError("latent export needs a variational checkpoint")
    ds, split, _ = load_data(cfg["data"])
    parts = split_dataset(ds, split, header["train_config"]["seed"])
    sub = _prepared(model, stats, _select(parts, cfg.get("subset", "all")))
    k = int(cfg.get("k", 5))
    exp = export_latent(model, sub, k, seed=int(cfg.get("seed", seed or 0)))
    out = io.ensure_dir(out)
    M = exp.means.shape[1]
    io.write_rows(out / "latent.csv", ["subject_id", *(f"latent_{j}" for j in range(M)), "cluster"],
                  ([sid, *(float(v) for v in exp.means[i]), int(exp.labels[i])]
                   for i, sid in enumerate(exp.subject_ids)))
    io.write_json(out / "config.json", {"command": "latent", **cfg})
    sizes = np.bincount(exp.labels, minlength=k)
    return {"n": len(sub), "k": k, "cluster_sizes": sizes.tolist()}
