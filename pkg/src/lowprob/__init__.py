"""Estimating rare argmax probabilities of small transformers."""
__version__ = "0.1.0"

from .dist import TokenDistribution, load_dist, save_dist, uniform
from .errors import ConfigError, ConvergenceError, InputError, LowProbError, NumericError
from .estimators import METHODS, EstimateRecord, EstimatorBudget, run_estimator
from .evaluation import EvalReport, constant_report, evaluate_records, fit_affine, fit_gld, is_loss, tune_temperature
from .groundtruth import exhaustive_distribution, monte_carlo_counts, select_targets
from .microlm import ModelSpec, ModelWeights, forward_logits, grad_target_logit, init_weights, load_model, save_model
from .rng import stream

__all__ = [
    "METHODS", "ConfigError", "ConvergenceError", "EstimateRecord", "EstimatorBudget", "EvalReport",
    "InputError", "LowProbError", "ModelSpec", "ModelWeights", "NumericError", "TokenDistribution",
    "constant_report", "evaluate_records", "exhaustive_distribution", "fit_affine", "fit_gld",
    "forward_logits", "grad_target_logit", "init_weights", "is_loss", "load_dist", "load_model",
    "monte_carlo_counts", "run_estimator", "save_dist", "save_model", "select_targets", "stream",
    "tune_temperature", "uniform",
]
