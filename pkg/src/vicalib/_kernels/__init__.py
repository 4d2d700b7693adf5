"""Hot per-subject kernels with a compiled core and a numpy fallback.

The compiled extension is selected at import time when present; both
backends expose the same functions and agree to floating-point round-off.
``BACKEND`` reports which one is active, and both remain importable (as
``_pyimpl`` / ``_cyimpl``) so the benchmark can compare them directly.
"""

from __future__ import annotations

import os

from . import _pyimpl

if os.environ.get("VICALIB_FORCE_NUMPY"):
    impl = _pyimpl
else:
    try:
        from . import _cyimpl as impl  # type: ignore[attr-defined]
    except ImportError:
        impl = _pyimpl

BACKEND: str = impl.BACKEND_NAME

STATUS_OK = _pyimpl.STATUS_OK
STATUS_MAXITER = _pyimpl.STATUS_MAXITER
STATUS_SADDLE = _pyimpl.STATUS_SADDLE
STATUS_LINESEARCH = _pyimpl.STATUS_LINESEARCH

glmm_psi_terms = impl.glmm_psi_terms
glmm_value = impl.glmm_value
glmm_profile = impl.glmm_profile
glmm_theta_parts = impl.glmm_theta_parts
glmm_block_moments = impl.glmm_block_moments
glmm_marginal = impl.glmm_marginal
