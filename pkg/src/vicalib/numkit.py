"""Dense symmetric linear algebra, finite differences, distribution quantiles,
and the reproducible random-stream contract used by the rest of the package.

Everything here operates on small dense arrays (dimension of the order of the
parameter count, not the sample size), so clarity wins over BLAS-level tuning.
Vectors are plain 1-d float64 ndarrays and symmetric matrices plain 2-d
ndarrays; ``as_vec`` / ``as_sym`` are the boundary validators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.special

from .errors import DomainError, NonFiniteEvaluation, NotPositiveDefinite, Singular

_EPS = float(np.finfo(float).eps)
# central first differences: eps**(1/3); second differences: eps**(1/4)
GRAD_STEP = _EPS ** (1.0 / 3.0)
HESS_STEP = _EPS ** 0.25

# Diagonal jitter ladder for nearly singular symmetric solves. Scaled by the
# mean absolute diagonal so the rescue is relative to the problem's scale.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


def as_vec(x, dim: int | None = None) -> np.ndarray:
    """Validate and return a finite 1-d float64 vector of length >= 1."""
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if dim is not None and v.size != dim:
        raise ValueError(f"expected dimension {dim}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    return v


def as_sym(m, dim: int | None = None, tol: float = 1e-8) -> np.ndarray:
    """Validate a square symmetric matrix; returns an exactly symmetrized copy."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if dim is not None and a.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------------------
# symmetric solves
# ---------------------------------------------------------------------------

def _chol_with_jitter(m: np.ndarray):
    """Cholesky factor of ``m`` with the diagonal jitter ladder.

    Returns ``(factor, jitter_used)``. Raises NotPositiveDefinite once the
    ladder is exhausted.
    """
    diag = np.abs(np.diag(m))
    scale = float(np.mean(diag)) if np.any(diag > 0) else 1.0
    eye = np.eye(m.shape[0])
    for delta in JITTER_LADDER:
        try:
            factor = scipy.linalg.cho_factor(m + delta * scale * eye, lower=True)
        except scipy.linalg.LinAlgError:
            continue
        return factor, delta * scale
    raise NotPositiveDefinite(
        f"matrix of dim {m.shape[0]} not positive definite after jitter ladder"
    )


def chol_solve(m, b) -> np.ndarray:
    """Solve ``m @ x = b`` for symmetric positive definite ``m``.

    One step of iterative refinement keeps the residual at the round-off
    level even when a jitter rescue was applied.
    """
    a = as_sym(m)
    rhs = as_vec(b, dim=a.shape[0])
    factor, _ = _chol_with_jitter(a)
    x = scipy.linalg.cho_solve(factor, rhs)
    resid = rhs - a @ x
    x = x + scipy.linalg.cho_solve(factor, resid)
    return x


def sym_inverse(m) -> np.ndarray:
    """Inverse of a symmetric invertible matrix, symmetrized exactly.

    Raises Singular when the matrix is rank deficient or so ill conditioned
    that the residual check ``|m @ inv - I|_inf <= 1e-8`` fails.
    """
    a = as_sym(m)
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise Singular(f"symmetric inverse failed: {exc}") from exc
    inv = 0.5 * (inv + inv.T)
    resid = np.max(np.abs(a @ inv - np.eye(a.shape[0])))
    if not np.isfinite(resid) or resid > 1e-8:
        raise Singular(f"inverse residual {resid:.3e} exceeds 1e-8")
    return inv


def precision_diag_variance(sigma, k: int) -> float:
    """Return ``1 / (sigma^{-1})_kk`` for positive definite ``sigma``.

    Equals the Schur complement ``sigma_kk - sigma_k. @ sigma_-kk^{-1} @
    sigma_k.^T``, hence never exceeds the marginal variance ``sigma_kk``.
    ``k`` is a 0-based index.
    """
    a = as_sym(sigma)
    n = a.shape[0]
    if not 0 <= k < n:
        raise IndexError(f"index {k} out of range for dimension {n}")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"covariance not positive definite: {exc}") from exc
    unit = np.zeros(n)
    unit[k] = 1.0
    col = scipy.linalg.cho_solve(factor, unit)
    return 1.0 / float(col[k])


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _eval_checked(f: Callable, x: np.ndarray, coordinate: int) -> float:
    val = float(f(x))
    if not math.isfinite(val):
        raise NonFiniteEvaluation(
            f"non-finite evaluation while perturbing coordinate {coordinate}",
            coordinate=coordinate,
        )
    return val


def grad_fd(f: Callable, x) -> np.ndarray:
    """Central-difference gradient with per-coordinate steps
    ``h_j = eps^(1/3) * max(1, |x_j|)``."""
    x0 = as_vec(x)
    grad = np.empty_like(x0)
    for j in range(x0.size):
        h = GRAD_STEP * max(1.0, abs(x0[j]))
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        fp = _eval_checked(f, xp, j)
        fm = _eval_checked(f, xm, j)
        grad[j] = (fp - fm) / (xp[j] - xm[j])
    return grad


def hess_fd(f: Callable, x) -> np.ndarray:
    """Symmetrized central second differences with ``h_j = eps^(1/4) *
    max(1, |x_j|)`` steps; the returned matrix is exactly symmetric."""
    x0 = as_vec(x)
    n = x0.size
    h = HESS_STEP * np.maximum(1.0, np.abs(x0))
    f0 = _eval_checked(f, x0, 0)
    hess = np.empty((n, n))
    for i in range(n):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        fp = _eval_checked(f, xp, i)
        fm = _eval_checked(f, xm, i)
        hess[i, i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i])
        for j in range(i + 1, n):
            xpp = x0.copy()
            xpm = x0.copy()
            xmp = x0.copy()
            xmm = x0.copy()
            xpp[i] += h[i]
            xpp[j] += h[j]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            xmm[i] -= h[i]
            xmm[j] -= h[j]
            val = (
                _eval_checked(f, xpp, j)
                - _eval_checked(f, xpm, j)
                - _eval_checked(f, xmp, j)
                + _eval_checked(f, xmm, j)
            ) / (4.0 * h[i] * h[j])
            hess[i, j] = val
            hess[j, i] = val
    return 0.5 * (hess + hess.T)


# ---------------------------------------------------------------------------
# distribution quantiles (monotone bisection on special-function CDFs)
# ---------------------------------------------------------------------------

def cdf(dist: str, x: float, *params: float) -> float:
    """CDF of one of ``normal``, ``student_t`` (df), ``chi2`` (df),
    ``f_dist`` (d1, d2)."""
    if dist == "normal":
        return float(scipy.special.ndtr(x))
    if dist == "student_t":
        (df,) = params
        if df <= 0:
            raise DomainError("degrees of freedom must be positive")
        return float(scipy.special.stdtr(df, x))
    if dist == "chi2":
        (df,) = params
        if df <= 0:
            raise DomainError("degrees of freedom must be positive")
        return float(scipy.special.chdtr(df, x)) if x > 0 else 0.0
    if dist == "f_dist":
        d1, d2 = params
        if d1 <= 0 or d2 <= 0:
            raise DomainError("degrees of freedom must be positive")
        return float(scipy.special.fdtr(d1, d2, x)) if x > 0 else 0.0
    raise DomainError(f"unknown distribution {dist!r}")


def sf(dist: str, x: float, *params: float) -> float:
    """Survival function ``1 - cdf`` evaluated without cancellation."""
    if dist == "normal":
        return float(scipy.special.ndtr(-x))
    if dist == "student_t":
        (df,) = params
        if df <= 0:
            raise DomainError("degrees of freedom must be positive")
        return float(scipy.special.stdtr(df, -x))
    if dist == "chi2":
        (df,) = params
        if df <= 0:
            raise DomainError("degrees of freedom must be positive")
        return float(scipy.special.chdtrc(df, x)) if x > 0 else 1.0
    if dist == "f_dist":
        d1, d2 = params
        if d1 <= 0 or d2 <= 0:
            raise DomainError("degrees of freedom must be positive")
        return float(scipy.special.fdtrc(d1, d2, x)) if x > 0 else 1.0
    raise DomainError(f"unknown distribution {dist!r}")


def quantile(dist: str, p: float, *params: float) -> float:
    """Inverse CDF by monotone bisection, accurate to 1e-8 relative.

    Supported distributions as in :func:`cdf`.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if dist == "normal":
        lo, hi = -1.0, 1.0
    elif dist in ("chi2", "f_dist"):
        lo, hi = 0.0, 1.0
    elif dist == "student_t":
        lo, hi = -1.0, 1.0
    else:
        raise DomainError(f"unknown distribution {dist!r}")
    # validate parameters (and fail fast) before bracketing
    cdf(dist, max(hi, 1.0), *params)

    for _ in range(400):
        if cdf(dist, lo, *params) < p:
            break
        lo = lo * 2.0 if lo < 0 else -1.0
    for _ in range(400):
        if cdf(dist, hi, *params) > p:
            break
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(dist, mid, *params) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# reproducible random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """64-bit avalanche finalizer; decorrelates nearby seeds."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """Deterministic, independently seeded random stream.

    Identical ``(master_seed, stream_index)`` pairs produce bit-identical
    draw sequences; distinct indices are routed through an avalanche hash so
    replicate streams are statistically independent and results do not
    depend on worker scheduling. One stream per worker or replicate;
    instances are immutable, generators are not shared.
    """

    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed <= _MASK64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.stream_index < 0:
            raise ValueError("stream_index must be non-negative")

    def _mixed_seed(self) -> int:
        state = _splitmix64(self.master_seed)
        return _splitmix64(state ^ ((self.stream_index * _GOLDEN) & _MASK64))

    def generator(self) -> np.random.Generator:
        """Fresh numpy generator; repeated calls restart the sequence."""
        return np.random.Generator(np.random.PCG64(self._mixed_seed()))

    def child(self, index: int) -> "RngStream":
        """Derived stream for sub-task ``index`` (replicates, multistarts)."""
        return RngStream(self._mixed_seed(), index)


def spd_from_cholesky(lower: Sequence[Sequence[float]]) -> np.ndarray:
    """Build a symmetric positive definite matrix from a lower factor."""
    arr = np.asarray(lower, dtype=float)
    return arr @ arr.T
