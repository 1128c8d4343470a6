"""Bayesian matrix factorization with side features and per-entity noise precisions.

Three interchangeable inference back-ends share one model definition: a staged
point estimate (``map_estimator``), a blocked Gibbs sampler (``gibbs``) and
mean-field variational inference (``vi``).
"""
from .model import (FeatureState, HyperState, PrecisionMode, PrecisionState, PriorConfig,
                    SparseRatings, predict, predict_entries)

__all__ = ["FeatureState", "HyperState", "PrecisionMode", "PrecisionState", "PriorConfig",
           "SparseRatings", "predict", "predict_entries"]
__version__ = "0.1.0"
