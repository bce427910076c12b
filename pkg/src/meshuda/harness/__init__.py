"""Training, sweeps, metrics and reporting."""
from .metrics import (
    MetricsReport,
    deformation_error,
    evaluate_metrics,
    evaluate_predictions,
    field_rmse,
    nrmse,
    per_sample_rmse,
    predict_normalized,
)
from .normalize import FieldNormalizer, NormalizationStats, normalize_fields
from .report import DifficultyResult, Report, build_report, per_seed_selection, unstable_cells, write_report
from .sweep import (
    DESK_GRID,
    PAPER_GRID,
    load_run,
    load_runs,
    run_id_for,
    sweep_configs,
    sweep_lambda,
    train_run,
)
from .training import (
    PROFILES,
    AdamW,
    ConditionedSurrogateRegressor,
    TrainConfig,
    TrainResult,
    clip_global_norm,
    cosine_lr,
    fit_surrogate,
)

__all__ = [
    "AdamW",
    "ConditionedSurrogateRegressor",
    "DESK_GRID",
    "DifficultyResult",
    "FieldNormalizer",
    "MetricsReport",
    "NormalizationStats",
    "PAPER_GRID",
    "PROFILES",
    "Report",
    "TrainConfig",
    "TrainResult",
    "build_report",
    "clip_global_norm",
    "cosine_lr",
    "deformation_error",
    "evaluate_metrics",
    "evaluate_predictions",
    "field_rmse",
    "fit_surrogate",
    "load_run",
    "load_runs",
    "normalize_fields",
    "nrmse",
    "per_sample_rmse",
    "per_seed_selection",
    "predict_normalized",
    "run_id_for",
    "sweep_configs",
    "sweep_lambda",
    "train_run",
    "unstable_cells",
    "write_report",
]
