"""Model-free barrier learning: data generation, regressors, expansion loops."""

from .data import Dataset, DeltaSample, RolloutSample, SamplerSpec, generate_dataset
from .expansion import (
    Iteration,
    clip_targets,
    derive_seed,
    encoder_for,
    expand_safe_set,
    expand_safe_set_with_max,
    fit_initial_barrier,
    iterate_expansion,
    overprediction_rate,
)
from .learned import LearnedBarrier, learned_barrier
from .mlp import InputEncoder, MLPRegressor, TrainConfig, fit_regressor, predict_with_uncertainty

__all__ = [
    "Dataset",
    "DeltaSample",
    "InputEncoder",
    "Iteration",
    "LearnedBarrier",
    "MLPRegressor",
    "RolloutSample",
    "SamplerSpec",
    "TrainConfig",
    "clip_targets",
    "derive_seed",
    "encoder_for",
    "expand_safe_set",
    "expand_safe_set_with_max",
    "fit_initial_barrier",
    "fit_regressor",
    "generate_dataset",
    "iterate_expansion",
    "learned_barrier",
    "overprediction_rate",
    "predict_with_uncertainty",
]
