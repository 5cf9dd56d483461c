"""Analysis of training logs: invariance, fits, decay prediction."""

from .decay import DecayPrediction, PredictionRefused, decay_report, decayed_loss, predict_decay_gain, tau_series
from .documents import fit_document, write_document
from .fits import (
    EigenPoint,
    InsufficientDataError,
    Optimum,
    ParaboloidFit,
    PowerLawFit,
    ScalingLaws,
    eigen_dynamics,
    eigen_series,
    fit_L0_elr,
    fit_noise_elr,
    fit_offset_power_law,
    fit_paraboloid,
    fit_run_power_law,
    fit_scaling_laws,
    loglog_fit,
    loss_at,
    optimum_from_fit,
    stable_noise_level,
)
from .invariance import (
    Curve,
    DegenerateGroupingError,
    GroupMatrix,
    InvarianceVerdict,
    PairwiseResult,
    UndefinedDistanceError,
    align_and_smooth,
    detect_invariance,
    ema,
    group_distance,
    pairwise_matrix,
    rel_distance,
    shuffled_labels,
)

__all__ = [
    "Curve",
    "DecayPrediction",
    "DegenerateGroupingError",
    "EigenPoint",
    "GroupMatrix",
    "InsufficientDataError",
    "InvarianceVerdict",
    "Optimum",
    "PairwiseResult",
    "ParaboloidFit",
    "PowerLawFit",
    "PredictionRefused",
    "ScalingLaws",
    "UndefinedDistanceError",
    "align_and_smooth",
    "decay_report",
    "decayed_loss",
    "detect_invariance",
    "eigen_dynamics",
    "eigen_series",
    "ema",
    "fit_L0_elr",
    "fit_document",
    "fit_noise_elr",
    "fit_offset_power_law",
    "fit_paraboloid",
    "fit_run_power_law",
    "fit_scaling_laws",
    "group_distance",
    "loglog_fit",
    "loss_at",
    "optimum_from_fit",
    "pairwise_matrix",
    "predict_decay_gain",
    "rel_distance",
    "shuffled_labels",
    "stable_noise_level",
    "tau_series",
    "write_document",
]
