"""Monte-Carlo studies on the simulated process and intervention sweeps on a
fixed dataset.

Every replicate draws its randomness from ``Rng(base_seed).child("rep", n,
rep)``, so results do not depend on how replicates are scheduled across
worker processes; results are always reduced in (n, rep) order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data_model import Dataset
from .dgp import DgpConfig, build_structure, fit_oracle_p, oracle_psi, simulate_dataset
from .estimator import EstimationError, EstimatorConfig, estimate_grid
from .intervention import InterventionSpec, MissingStratumError
from .neural import TrainingDivergedError
from .numerics import Rng

log = logging.getLogger(__name__)

MAX_FAIL_FRACTION = 0.10
REP_FAILURES = (MissingStratumError, EstimationError, TrainingDivergedError)


class McStudyError(RuntimeError):
    pass


@dataclass(frozen=True)
class McStudyConfig:
    sample_sizes: tuple = (2000, 3000, 4000, 5000)
    delta_grid: tuple = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0)
    reps: int = 200
    dgp: DgpConfig = DgpConfig()
    estimator: EstimatorConfig = EstimatorConfig(k_folds=2)
    n_oracle: int = 5000
    n_truth: int = 5000
    base_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        object.__setattr__(self, "delta_grid", tuple(float(d) for d in self.delta_grid))
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if not self.sample_sizes or not self.delta_grid:
            raise ValueError("sample_sizes and delta_grid must be non-empty")
        if min(self.sample_sizes) < 1:
            raise ValueError("sample sizes must be positive")
        if min(self.delta_grid) <= 0:
            raise ValueError("delta values must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def interventions(self) -> list:
        return [InterventionSpec.uniform(d, self.dgp.s_max) for d in self.delta_grid]


@dataclass(frozen=True)
class McMetricsRow:
    n: int
    delta: float
    bias: float
    rmse: float
    coverage: float
    avg_ci_length: float
    reps_completed: int
    reps_failed: int
    bias_mc_se: float = float("nan")
    psi_true: float = float("nan")


@dataclass(frozen=True)
class RepRecord:
    n: int
    rep: int
    delta: float
    psi_true: float
    psi_hat: float = float("nan")
    se: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    @property
    def covered(self) -> bool:
        return self.ok and self.ci_low <= self.psi_true <= self.ci_high


@dataclass
class McStudyResult:
    metrics: list
    reps: list
    truth: dict                      # delta -> OraclePsi
    manifest: dict = field(default_factory=dict)


def oracle_truth(cfg: McStudyConfig, st=None) -> dict:
    """Psi_true for every grid value, shared by all replicates: history
    probabilities from one large sample, then one intervened sample per
    delta with common random numbers."""
    st = st or build_structure(cfg.dgp)
    base = Rng(cfg.dgp.noise_seed).child("oracle")
    ptab = fit_oracle_p(cfg.dgp, st, cfg.n_oracle, base.child("p"))
    return {d.delta[0]: oracle_psi(cfg.dgp, st, ptab, d, cfg.n_truth, base.child("psi"))
            for d in cfg.interventions}


def _run_rep(args):
    cfg, st, n, rep, truth = args
    started = time.perf_counter()
    rng = Rng(cfg.base_seed).child("rep", n, rep)
    ds, _ = simulate_dataset(cfg.dgp, st, n, rng.child("data"))
    try:
        results = estimate_grid(ds, cfg.interventions, cfg.estimator, rng.child("estimate"))
    except REP_FAILURES as exc:
        msg = f"{type(exc).__name__}: {exc}"
        log.warning("n=%d rep=%d failed: %s", n, rep, msg)
        return [RepRecord(n, rep, d, truth[d], error=msg) for d in cfg.delta_grid]
    log.info("n=%d rep=%d done in %.1fs", n, rep, time.perf_counter() - started)
    return [RepRecord(n, rep, d, truth[d], r.psi_hat, float(r.se), r.ci_low, r.ci_high)
            for d, r in zip(cfg.delta_grid, results)]


def _metrics(n, delta, records) -> McMetricsRow:
    ok = [r for r in records if r.ok]
    failed = len(records) - len(ok)
    truth = records[0].psi_true
    if not ok:
        nan = float("nan")
        return McMetricsRow(n, delta, nan, nan, nan, nan, 0, failed, nan, truth)
    err = np.array([r.psi_hat - r.psi_true for r in ok])
    bias = float(np.mean(err))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    coverage = float(np.mean([r.covered for r in ok]))
    length = float(np.mean([r.ci_high - r.ci_low for r in ok]))
    mc_se = float(np.std(err, ddof=1) / np.sqrt(len(err))) if len(err) > 1 else float("nan")
    return McMetricsRow(n, delta, bias, rmse, coverage, length, len(ok), failed, mc_se, truth)


def run_mc_study(cfg: McStudyConfig) -> McStudyResult:
    st = build_structure(cfg.dgp)
    truth = oracle_truth(cfg, st)
    psi = {d: o.psi for d, o in truth.items()}
    tasks = [(cfg, st, n, rep, psi) for n in cfg.sample_sizes for rep in range(cfg.reps)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            per_rep = list(pool.map(_run_rep, tasks))
    else:
        per_rep = [_run_rep(t) for t in tasks]
    records = [r for batch in per_rep for r in batch]

    metrics = []
    for n in cfg.sample_sizes:
        n_failed = sum(1 for batch in per_rep if batch[0].n == n and not batch[0].ok)
        if n_failed > MAX_FAIL_FRACTION * cfg.reps:
            raise McStudyError(f"n={n}: {n_failed} of {cfg.reps} replicates failed")
        for d in cfg.delta_grid:
            metrics.append(_metrics(n, d, [r for r in records if r.n == n and r.delta == d]))
    return McStudyResult(metrics, records, truth, study_manifest(cfg, truth))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=repr)


def config_hash(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()[:16]


def study_manifest(cfg: McStudyConfig, truth: dict) -> dict:
    settings = asdict(replace(cfg, workers=1))
    settings.pop("workers")
    truth_rows = {repr(d): [repr(o.psi), repr(o.mc_se), o.n_truth] for d, o in truth.items()}
    return {
        "base_seed": cfg.base_seed,
        "config_hash": config_hash(settings),
        "truth": truth_rows,
        "truth_hash": config_hash(truth_rows),
    }


METRIC_FIELDS = ("n", "delta", "bias", "rmse", "coverage", "avg_ci_length", "reps_completed",
                 "reps_failed", "bias_mc_se", "psi_true")
REP_FIELDS = ("n", "rep", "delta", "psi_true", "psi_hat", "se", "ci_low", "ci_high", "covered", "error")


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, float):
        return repr(x)
    return x


def write_mc_outputs(result: McStudyResult, metrics_path, reps_path=None) -> None:
    with open(metrics_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_FIELDS)
        for m in result.metrics:
            wr.writerow([_cell(getattr(m, k)) for k in METRIC_FIELDS])
    if reps_path is None:
        return
    with open(reps_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REP_FIELDS)
        for r in result.reps:
            wr.writerow([_cell(getattr(r, k)) for k in REP_FIELDS])


# ---------------------------------------------------------------------------
# intervention sweeps on one dataset


def log_grid(lo: float, hi: float, points: int) -> np.ndarray:
    """Log-uniform grid including both ends."""
    if not 0 < lo <= hi:
        raise ValueError(f"need 0 < lo <= hi, got {lo}, {hi}")
    if points < 1:
        raise ValueError("points must be >= 1")
    return np.geomspace(lo, hi, points) if points > 1 else np.array([float(lo)])


def sweep_interventions(grid, s_max: int, position=None) -> list:
    """``position=None`` shifts every segment; an integer position shifts only
    that (1-based) segment and leaves the others at 1."""
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("empty grid")
    if np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise ValueError(f"grid values must be positive, got {grid[(grid <= 0) | ~np.isfinite(grid)][:3]}")
    if position is not None and not 1 <= position <= s_max:
        raise ValueError(f"position {position} outside 1..{s_max}")
    out = []
    for g in np.sort(grid):
        if position is None:
            out.append(InterventionSpec.uniform(g, s_max))
        else:
            d = [1.0] * s_max
            d[position - 1] = float(g)
            out.append(InterventionSpec(tuple(d)))
    return out


@dataclass(frozen=True)
class SweepRow:
    target_position: str      # "all" or the shifted segment index
    delta: float
    delta_vector: tuple
    psi_hat: float
    se: float
    ci_low: float
    ci_high: float


def run_delta_sweep(ds: Dataset, positions, grid, cfg: EstimatorConfig, rng: Rng) -> list:
    """``positions`` is "uniform" or a list of 1-based segment indices. Each
    sweep fits its nuisances once; rows are sorted by delta within a sweep."""
    targets = [None] if positions in ("uniform", None) else [int(p) for p in np.atleast_1d(positions)]
    rows = []
    for pos in targets:
        specs = sweep_interventions(grid, ds.s_max, pos)
        results = estimate_grid(ds, specs, cfg, rng)
        label = "all" if pos is None else str(pos)
        for spec, res in zip(specs, results):
            g = spec.delta[0] if pos is None else spec.delta[pos - 1]
            rows.append(SweepRow(label, g, spec.delta, res.psi_hat, float(res.se), res.ci_low, res.ci_high))
    return rows


SWEEP_FIELDS = ("target_position", "delta", "psi_hat", "se", "ci_low", "ci_high", "delta_vector")


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SWEEP_FIELDS)
        for r in rows:
            wr.writerow([r.target_position, repr(r.delta), repr(r.psi_hat), repr(r.se), repr(r.ci_low),
                         repr(r.ci_high), " ".join(repr(x) for x in r.delta_vector)])
