"""Command-line entry point.

    dyngpi <subcommand> [--config FILE] [--set key.path=value ...] [--seed N]
                        [--workers N] [--out DIR]

Subcommands: simulate, oracle, estimate, mc-study, sweep, ingest-check.

The config file (YAML or JSON) may hold these top-level sections; any other
key, at any depth, is rejected::

    seed: 0
    workers: 1                 # mc-study only; never changes results
    out: run                   # output directory
    dgp: {...}                 # DgpConfig fields
    estimator:                 # EstimatorConfig fields
      k_folds: 10
      c_overlap: 0.01
      backend: neural          # or saturated (needs oracle_coords)
      oracle_coords: []
      arch: {encoder_hidden: [64], d_f: 32, head_hidden: [128, 64], nuisance_hidden: [128, 64]}
      deconf_train: {...}      # TrainConfig fields
      nuisance_train: {...}
    simulate: {n: 2000}
    oracle: {deltas: [0.5, 1.0, 2.0], n_oracle: 5000, n_truth: 5000}
    estimate: {data: data.jsonl, deltas: [1.0]}
    mc_study: {sample_sizes: [...], delta_grid: [...], reps: 200, n_oracle: 5000, n_truth: 5000, k_folds: 2}
    sweep: {data: data.jsonl, positions: uniform, grid: [0.5, 1, 2], log_grid: null}
    ingest_check: {embeddings: e.jsonl, outcomes: y.csv, treatments: w.csv, s_max: null}

A delta entry is either a number (same value at every segment) or a list
with one value per segment. ``sweep.log_grid: [lo, hi, points]`` replaces
``grid`` with a log-uniform grid; ``positions`` is ``uniform`` or a list of
1-based segment indices.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 estimation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from .data_model import DataError, ingest_embeddings, load_dataset, save_dataset
from .dgp import DgpConfig, build_structure, fit_oracle_p, oracle_psi, simulate_dataset
from .estimator import EstimationError, EstimatorConfig, estimate_grid, write_estimates_csv
from .harness import (McStudyConfig, McStudyError, config_hash, log_grid, run_delta_sweep, run_mc_study,
                      write_mc_outputs, write_sweep_csv)
from .intervention import InterventionSpec, MissingStratumError
from .neural import TrainingDivergedError
from .numerics import Rng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4

SUBCOMMANDS = ("simulate", "oracle", "estimate", "mc-study", "sweep", "ingest-check")

SECTIONS = {
    "simulate": {"n": 2000},
    "oracle": {"deltas": [0.5, 1.0, 2.0], "n_oracle": 5000, "n_truth": 5000},
    "estimate": {"data": None, "deltas": [1.0]},
    "mc_study": {"sample_sizes": [2000, 3000, 4000, 5000], "delta_grid": [0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
                 "reps": 200, "n_oracle": 5000, "n_truth": 5000, "k_folds": 2},
    "sweep": {"data": None, "positions": "uniform", "grid": [0.5, 1.0, 2.0], "log_grid": None},
    "ingest_check": {"embeddings": None, "outcomes": None, "treatments": None, "s_max": None},
}
TOP_LEVEL = {"seed": 0, "workers": 1, "out": "run"}
NESTED = {"dgp": DgpConfig, "estimator": EstimatorConfig}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _as_plain(inst) -> dict:
    # walks the default instance, so nested defaults set by the parent (such as
    # the two training schedules of EstimatorConfig) are kept
    out = {}
    for f in dataclasses.fields(inst):
        v = getattr(inst, f.name)
        out[f.name] = _as_plain(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def default_config() -> dict:
    cfg = dict(TOP_LEVEL)
    for name, cls in NESTED.items():
        cfg[name] = _as_plain(cls())
    for name, sec in SECTIONS.items():
        cfg[name] = dict(sec)
    return cfg


def _merge(base: dict, new: dict, path=""):
    for key, val in new.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {dotted!r} must be a mapping")
            _merge(base[key], val, dotted + ".")
        else:
            base[key] = val


def _apply_override(cfg: dict, item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        val = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    nested = val
    for part in reversed(key.split(".")):
        nested = {part: nested}
    _merge(cfg, nested)


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if data is not None:
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a mapping")
            _merge(cfg, data)
    for item in overrides:
        _apply_override(cfg, item)
    return cfg


def _build(cls, data: dict, where: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        v = data[f.name]
        default = getattr(cls(), f.name)
        if dataclasses.is_dataclass(default):
            v = _build(type(default), v, f"{where}.{f.name}")
        elif isinstance(default, tuple):
            v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def dgp_config(cfg) -> DgpConfig:
    return _build(DgpConfig, cfg["dgp"], "dgp")


def estimator_config(cfg, k_folds=None) -> EstimatorConfig:
    est = dict(cfg["estimator"])
    if k_folds is not None:
        est["k_folds"] = k_folds
    return _build(EstimatorConfig, est, "estimator")


def _interventions(values, s_max: int, where: str) -> list:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{where} must be a non-empty list")
    out = []
    for v in values:
        try:
            out.append(InterventionSpec(tuple(v)) if isinstance(v, list) else InterventionSpec.uniform(v, s_max))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if out[-1].s_max != s_max:
            raise ConfigError(f"{where}: {v} has {out[-1].s_max} entries, expected {s_max}")
    return out


def _need(section: dict, key: str, where: str):
    if section.get(key) is None:
        raise ConfigError(f"{where}.{key} is required")
    return section[key]


def _count(section: dict, key: str, where: str) -> int:
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"{where}.{key} must be a positive integer, got {v!r}")
    return v


# ---------------------------------------------------------------------------
# subcommands; each returns (manifest extras, list of written files)


def _cmd_simulate(cfg, out: Path):
    dcfg = dgp_config(cfg)
    n = _count(cfg["simulate"], "n", "simulate")
    ds, _ = simulate_dataset(dcfg, build_structure(dcfg), n, Rng(cfg["seed"]).child("simulate"))
    path = out / "dataset.jsonl"
    save_dataset(ds, path)
    return {"n": ds.n, "s_max": ds.s_max, "d_r": ds.d_r}, [path]


def _cmd_oracle(cfg, out: Path):
    dcfg = dgp_config(cfg)
    sec = cfg["oracle"]
    specs = _interventions(sec["deltas"], dcfg.s_max, "oracle.deltas")
    st = build_structure(dcfg)
    base = Rng(cfg["seed"]).child("oracle")
    n_oracle, n_truth = _count(sec, "n_oracle", "oracle"), _count(sec, "n_truth", "oracle")
    ptab = fit_oracle_p(dcfg, st, n_oracle, base.child("p"))
    ptab.to_csv(out / "p_tables.csv")
    path = out / "oracle.csv"
    with open(path, "w") as fh:
        fh.write(",".join([f"delta_{s}" for s in range(1, dcfg.s_max + 1)] + ["psi_true", "mc_se", "n_truth"]) + "\n")
        for spec in specs:
            o = oracle_psi(dcfg, st, ptab, spec, n_truth, base.child("psi"))
            fh.write(",".join([repr(x) for x in spec.delta] + [repr(o.psi), repr(o.mc_se), str(o.n_truth)]) + "\n")
    return {}, [out / "p_tables.csv", path]


def _load(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None


def _cmd_estimate(cfg, out: Path):
    sec = cfg["estimate"]
    ds = _load(_need(sec, "data", "estimate"))
    specs = _interventions(sec["deltas"], ds.s_max, "estimate.deltas")
    results = estimate_grid(ds, specs, estimator_config(cfg), Rng(cfg["seed"]).child("estimate"))
    path = out / "estimates.csv"
    write_estimates_csv(results, ds.s_max, path)
    return {"n": ds.n}, [path]


def _cmd_mc_study(cfg, out: Path):
    sec = cfg["mc_study"]
    try:
        study = McStudyConfig(sample_sizes=tuple(sec["sample_sizes"]), delta_grid=tuple(sec["delta_grid"]),
                              reps=int(sec["reps"]), dgp=dgp_config(cfg),
                              estimator=estimator_config(cfg, int(sec["k_folds"])),
                              n_oracle=int(sec["n_oracle"]), n_truth=int(sec["n_truth"]),
                              base_seed=int(cfg["seed"]), workers=int(cfg["workers"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"mc_study: {exc}") from None
    result = run_mc_study(study)
    paths = [out / "mc_metrics.csv", out / "mc_reps.csv"]
    write_mc_outputs(result, *paths)
    return {"truth_hash": result.manifest["truth_hash"]}, paths


def _cmd_sweep(cfg, out: Path):
    sec = cfg["sweep"]
    ds = _load(_need(sec, "data", "sweep"))
    grid = sec["grid"]
    if sec["log_grid"] is not None:
        try:
            lo, hi, points = sec["log_grid"]
            grid = log_grid(float(lo), float(hi), int(points))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep.log_grid: {exc}") from None
    positions = sec["positions"]
    if positions != "uniform":
        positions = positions if isinstance(positions, list) else [positions]
        if any(not isinstance(p, int) or not 1 <= p <= ds.s_max for p in positions):
            raise ConfigError(f"sweep.positions must be 'uniform' or indices in 1..{ds.s_max}")
    try:
        grid = np.asarray(grid, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep.grid: {exc}") from None
    if grid.size == 0 or np.any(~(grid > 0)):
        raise ConfigError("sweep.grid values must be positive")
    rows = run_delta_sweep(ds, positions, grid, estimator_config(cfg), Rng(cfg["seed"]).child("sweep"))
    path = out / "sweep.csv"
    write_sweep_csv(rows, path)
    return {"n": ds.n, "rows": len(rows)}, [path]


def _cmd_ingest_check(cfg, out: Path):
    sec = cfg["ingest_check"]
    args = [_need(sec, k, "ingest_check") for k in ("embeddings", "outcomes", "treatments")]
    try:
        ds = ingest_embeddings(*args, s_max=sec["s_max"])
    except OSError as exc:
        raise DataError(str(exc)) from None
    except KeyError as exc:
        raise DataError(f"missing column {exc}") from None
    path = out / "dataset.jsonl"
    save_dataset(ds, path)
    summary = {"n": ds.n, "s_max": ds.s_max, "d_r": ds.d_r,
               "segments": {str(s): int(np.sum(ds.s_len == s)) for s in range(1, ds.s_max + 1)},
               "treated_fraction": repr(float(ds.w[ds.mask].mean()))}
    return summary, [path]


COMMANDS = {
    "simulate": _cmd_simulate,
    "oracle": _cmd_oracle,
    "estimate": _cmd_estimate,
    "mc-study": _cmd_mc_study,
    "sweep": _cmd_sweep,
    "ingest-check": _cmd_ingest_check,
}


def versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"artifact": pkg, "numpy": np.__version__, "python": platform.python_version()}


def _manifest(command, cfg, extras, paths) -> dict:
    # workers and out never change results, so they stay out of the hash
    settings = {k: v for k, v in cfg.items() if k not in ("workers", "out")}
    return {"command": command, "seed": cfg["seed"], "config_hash": config_hash(settings),
            "versions": versions(), "outputs": [p.name for p in paths], **extras}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dyngpi", description="Incremental-intervention effects of "
                                 "segment-level treatments on embedding data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. estimate.deltas=[0.5,2]")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help="output directory")
    return ap


def cli_main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        overrides = list(args.set)
        for key in ("seed", "workers", "out"):
            if getattr(args, key) is not None:
                overrides.append(f"{key}={getattr(args, key)}")
        cfg = load_config(args.config, overrides)
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        out = Path(str(cfg["out"]))
        out.mkdir(parents=True, exist_ok=True)
        extras, paths = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, MissingStratumError, TrainingDivergedError, McStudyError) as exc:
        print(f"estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    manifest = _manifest(args.command, cfg, extras, paths)
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (out / "manifest.json").write_text(text + "\n")
    print(text)
    print(f"elapsed {time.perf_counter() - started:.1f}s", file=sys.stderr)
    return EXIT_OK


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
