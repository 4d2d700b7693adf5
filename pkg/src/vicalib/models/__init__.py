"""Built-in models: exponential mixture (with its conjugate variational
Bayes baseline) and the logistic random-intercept model."""

from .expmix import ExpMixDatum, ExpMixModel, dataset_from_arrays
from .expmix_vb import VbPosterior, VbPrior, fit_vb
from .glmm_ri import (
    GlmmRiModel,
    GlmmSubject,
    MleResult,
    bootstrap_templates,
    synthetic_templates,
)

__all__ = [
    "ExpMixDatum",
    "ExpMixModel",
    "GlmmRiModel",
    "GlmmSubject",
    "MleResult",
    "VbPosterior",
    "VbPrior",
    "bootstrap_templates",
    "dataset_from_arrays",
    "fit_vb",
    "synthetic_templates",
]
