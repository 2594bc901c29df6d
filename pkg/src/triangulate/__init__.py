"""Triangulation of causal effect estimates from routinely collected data."""

from .cohort import Cohort, load_cohort
from .estimators import EstimateResult, EstimatorOptions, estimate
from .glm import DesignSpec, GlmFit, fit_glm, fit_logistic, fit_ols

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "DesignSpec",
    "EstimateResult",
    "EstimatorOptions",
    "GlmFit",
    "estimate",
    "fit_glm",
    "fit_logistic",
    "fit_ols",
    "load_cohort",
]
