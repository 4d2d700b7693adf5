"""Variational estimation as profile M-estimation, with calibration tools.

Submodules
----------
numkit
    Small dense linear algebra, finite differences, quantiles, rng streams.
quadrature
    Gauss-Hermite rules and adaptive recentered marginal integrals.
vcore
    Model interface and the two-stage (inner psi / outer theta) engine.
sandwich
    Model-robust covariance of the fitted structural parameter.
consistency
    Simulation-based mean-zero gradient test of estimator consistency.
onestep
    Newton correction toward the marginal maximum-likelihood estimate.
models
    Built-in exponential-mixture and random-intercept logistic models.
harness
    CLI, configs, CSV/JSON schemas, and replicated simulation studies.
"""

from ._kernels import BACKEND as kernel_backend
from .numkit import RngStream
from .vcore import (
    Dataset,
    FitConfig,
    FitResult,
    VariationalModel,
    fit_variational,
    profile_psi,
    profiled_criterion,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FitConfig",
    "FitResult",
    "RngStream",
    "VariationalModel",
    "fit_variational",
    "kernel_backend",
    "profile_psi",
    "profiled_criterion",
    "__version__",
]
