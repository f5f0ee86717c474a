"""Cross-fitted estimation of incremental-intervention effects for
segment-level treatments whose confounding lives in text or media embeddings."""

from .data_model import DataError, Dataset, Trajectory, ingest_embeddings, load_dataset, save_dataset
from .dgp import DgpConfig, DiscreteDgp, build_structure, fit_oracle_p, oracle_psi, simulate_dataset
from .estimator import EstimateResult, EstimationError, EstimatorConfig, estimate, estimate_grid
from .harness import McStudyConfig, McMetricsRow, run_delta_sweep, run_mc_study
from .intervention import InterventionSpec, MissingStratumError, PTables, dq_weight, fit_p_tables, odds_ratio, q_shift
from .numerics import Rng

__all__ = [
    "DataError", "Dataset", "Trajectory", "ingest_embeddings", "load_dataset", "save_dataset",
    "DgpConfig", "DiscreteDgp", "build_structure", "fit_oracle_p", "oracle_psi", "simulate_dataset",
    "EstimateResult", "EstimationError", "EstimatorConfig", "estimate", "estimate_grid",
    "McStudyConfig", "McMetricsRow", "run_delta_sweep", "run_mc_study",
    "InterventionSpec", "MissingStratumError", "PTables", "dq_weight", "fit_p_tables", "odds_ratio", "q_shift",
    "Rng",
]
