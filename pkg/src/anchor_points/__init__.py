"""Anchor point selection and micro-benchmarking of classifiers."""

from .anchors import AnchorSelector, AnchorSet, brute_force_anchors, pam, select_anchors
from .corr import CorrelationModel, approximate_rank, correlation_matrix, logit
from .estimator import (
    AnchorPointPredictor,
    AnchorPointWeighted,
    PredictorModel,
    apw_score,
    fit_predictor,
    predict_all,
    predict_classes,
)
from .evalharness import (
    ExperimentConfig,
    UndefinedTauError,
    aucc,
    kendall_tau,
    run_agreement_experiment,
    run_ranking_experiment,
)
from .mapviz import ClassicalMDS, mds_coordinates, render_map
from .synth import SynthSpec, draw_models, generate_population
from .tensor_io import (
    ConfidenceMatrix,
    PredictionTensor,
    TensorFormatError,
    TensorValueError,
    correct_class_matrix,
    load_prediction_tensor,
    save_prediction_tensor,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorPointPredictor", "AnchorPointWeighted", "AnchorSelector", "AnchorSet",
    "ClassicalMDS", "ConfidenceMatrix", "CorrelationModel", "ExperimentConfig",
    "PredictionTensor", "PredictorModel", "SynthSpec", "TensorFormatError",
    "TensorValueError", "UndefinedTauError", "approximate_rank", "apw_score", "aucc",
    "brute_force_anchors", "correct_class_matrix", "correlation_matrix", "draw_models",
    "fit_predictor", "generate_population", "kendall_tau", "load_prediction_tensor",
    "logit", "mds_coordinates", "pam", "predict_all", "predict_classes", "render_map",
    "run_agreement_experiment", "run_ranking_experiment", "save_prediction_tensor",
    "select_anchors", "validate",
]
