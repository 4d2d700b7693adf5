"""Exception hierarchy shared across the package.

Numerical failures carry enough context (datum index, coordinate, ...) for a
caller to decide between aborting and retrying with a different
configuration.
"""

from __future__ import annotations


class VicalibError(Exception):
    """Base class for all package-specific failures."""


# --- linear algebra / differentiation ---------------------------------------

class NotPositiveDefinite(VicalibError):
    """Cholesky failed even after the jitter ladder was exhausted."""


class Singular(VicalibError):
    """Symmetric matrix is numerically rank deficient."""


class NonFiniteEvaluation(VicalibError):
    """A function evaluation returned nan or inf."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


class DomainError(VicalibError):
    """Argument outside the mathematical domain (e.g. probability not in (0,1))."""


# --- quadrature ---------------------------------------------------------------

class OrderOutOfRange(VicalibError):
    """Requested quadrature order outside the supported range."""


class ModeSearchFailed(VicalibError):
    """No interior maximum of the log-integrand was found."""


class CurvatureNotNegative(VicalibError):
    """Second derivative at the located mode is not negative."""


class QuadratureFailed(VicalibError):
    """A marginal-likelihood integral could not be evaluated."""


# --- inner/outer optimization --------------------------------------------------

class InnerDivergence(VicalibError):
    """Per-datum variational optimization exceeded its iteration budget."""

    def __init__(self, message: str, datum_index: int | None = None):
        super().__init__(message)
        self.datum_index = datum_index


class SaddleDetected(VicalibError):
    """Stationary point of the inner problem is not a local maximum."""

    def __init__(self, message: str, datum_index: int | None = None):
        super().__init__(message)
        self.datum_index = datum_index


class NoConvergedStart(VicalibError):
    """Every multistart attempt failed to converge."""


class NoConvergence(VicalibError):
    """Direct likelihood optimization failed to converge."""


# --- covariance estimation ------------------------------------------------------

class InnerHessianSingular(VicalibError):
    """Per-datum variational Hessian could not be inverted."""

    def __init__(self, message: str, datum_index: int | None = None):
        super().__init__(message)
        self.datum_index = datum_index


class AHatSingular(VicalibError):
    """Outer curvature matrix is singular; no sandwich covariance."""


class VHatSingular(VicalibError):
    """Sandwich covariance is singular; joint test unavailable."""


class NegativeVariance(VicalibError):
    """A diagonal entry of the covariance estimate is negative."""


class InfoSingular(VicalibError):
    """Observed information matrix is singular."""


# --- consistency assessment ------------------------------------------------------

class SingularSampleCovariance(VicalibError):
    """Sample covariance of the gradient replicates is singular."""


class ZeroVariance(VicalibError):
    """A gradient column is constant and nonzero; t statistic undefined."""

    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


# --- variational Bayes baseline ---------------------------------------------------

class NonIncreasingElbo(VicalibError):
    """Coordinate-ascent objective decreased; indicates an implementation bug."""


# --- harness ---------------------------------------------------------------------

class ConfigError(VicalibError):
    """Invalid or unknown configuration entry."""


class DataFormatError(VicalibError):
    """Input data file failed validation."""
