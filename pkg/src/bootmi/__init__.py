"""Sequential evidence aggregation for variable selection under missing data."""

from .benchmarks import UnionHistory, frequency_threshold, matched_budget_sets, union_rule
from .config import RunConfig
from .dataset import CompletedDataset, IncompleteDataset, load_csv, write_csv
from .detect import DetectionHistory, DetectionRow, LambdaRule, PdsSelection, detect, pds_candidate
from .evidence import (
    Calibration,
    CalibrationFallbackError,
    EvidenceState,
    SequentialResult,
    break_even,
    calibrate,
    classify,
    decision_threshold,
    drift,
    evidence_update,
    expected_stopping_time,
    pilot_frequencies,
    run_sequential,
)
from .perturb import PerturbationConfig, bootstrap_rows, impute_m, impute_once
from .pooling import PooledEstimate, final_estimate, final_estimates, rubin_pool
from .regress import LassoFit, OlsFit, lasso_fit, ols_fit, select_lambda_cv

__version__ = "0.1.0"
