"""Gauss-Hermite rules and adaptive recentered quadrature for
one-dimensional latent-variable integrals.

The physicists' convention is used throughout: nodes and weights integrate
against the weight function ``exp(-t^2)``, so Gaussian expectations use the
change of variables ``z = mean + sqrt(2) * sd * t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    CurvatureNotNegative,
    ModeSearchFailed,
    NonFiniteEvaluation,
    OrderOutOfRange,
)
from .numkit import GRAD_STEP, HESS_STEP

SQRT_PI = math.sqrt(math.pi)
SQRT2 = math.sqrt(2.0)

DEFAULT_EXPECT_ORDER = 20
DEFAULT_MARGINAL_ORDER = 30


@dataclass(frozen=True)
class GhRule:
    """Gauss-Hermite nodes and weights of a fixed order.

    Nodes are symmetric about zero, weights are positive and sum to
    ``sqrt(pi)``; the rule is exact for polynomials up to degree
    ``2 * order - 1``.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return self.nodes.size


def gh_rule(order: int) -> GhRule:
    """Nodes and weights via Golub-Welsch on the Jacobi matrix."""
    if not 1 <= order <= 100:
        raise OrderOutOfRange(f"order must lie in [1, 100], got {order}")
    if order == 1:
        return GhRule(nodes=np.zeros(1), weights=np.array([SQRT_PI]))
    off_diag = np.sqrt(np.arange(1, order) / 2.0)
    jacobi = np.diag(off_diag, 1) + np.diag(off_diag, -1)
    nodes, vectors = np.linalg.eigh(jacobi)
    weights = SQRT_PI * vectors[0, :] ** 2
    # eigh returns sorted nodes; enforce the exact +/- symmetry of the rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return GhRule(nodes=nodes, weights=weights)


def gauss_expect(rule: GhRule, f: Callable[[float], float], mean: float, sd: float) -> float:
    """Expectation of ``f(Z)`` for ``Z ~ N(mean, sd^2)``."""
    if not sd > 0:
        raise ValueError(f"sd must be positive, got {sd}")
    points = mean + SQRT2 * sd * rule.nodes
    values = np.array([float(f(p)) for p in points])
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NonFiniteEvaluation(
            f"integrand not finite at node {bad} (z={points[bad]!r})"
        )
    return float(rule.weights @ values) / SQRT_PI


def _fd_derivs(logjoint: Callable[[float], float], z: float) -> tuple[float, float]:
    """Central-difference first and second derivatives of the log-integrand."""
    h1 = GRAD_STEP * max(1.0, abs(z))
    fp = logjoint(z + h1)
    fm = logjoint(z - h1)
    d1 = (fp - fm) / (2.0 * h1)
    h2 = HESS_STEP * max(1.0, abs(z))
    d2 = (logjoint(z + h2) - 2.0 * logjoint(z) + logjoint(z - h2)) / (h2 * h2)
    return d1, d2


def _locate_mode(logjoint: Callable[[float], float], max_iter: int = 100) -> float:
    """Safeguarded Newton ascent with a bisection fallback.

    The derivative-sign bracket starts at [-10, 10] and expands
    geometrically until it encloses an interior maximum.
    """
    lo, hi = -10.0, 10.0
    for _ in range(60):
        d_lo, _ = _fd_derivs(logjoint, lo)
        if d_lo > 0:
            break
        lo *= 2.0
    else:
        raise ModeSearchFailed("no ascent direction found on the left bracket")
    for _ in range(60):
        d_hi, _ = _fd_derivs(logjoint, hi)
        if d_hi < 0:
            break
        hi *= 2.0
    else:
        raise ModeSearchFailed("no descent direction found on the right bracket")

    z = 0.0 if lo < 0.0 < hi else 0.5 * (lo + hi)
    for _ in range(max_iter):
        d1, d2 = _fd_derivs(logjoint, z)
        if d1 > 0:
            lo = max(lo, z)
        elif d1 < 0:
            hi = min(hi, z)
        step_ok = d2 < 0
        if step_ok:
            z_new = z - d1 / d2
            if not lo <= z_new <= hi:
                step_ok = False
        if not step_ok:
            z_new = 0.5 * (lo + hi)
        # the step tolerance must sit above the difference-quotient noise
        # floor, which is around |f| eps / h ~ 1e-10 for O(1) integrands
        if abs(z_new - z) <= 1e-9 * max(1.0, abs(z)):
            return z_new
        z = z_new
    raise ModeSearchFailed(f"no interior maximum found in {max_iter} iterations")


def adaptive_marginal(logjoint: Callable[[float], float], rule: GhRule) -> float:
    """Log of ``integral exp(logjoint(z)) dz`` by mode-recentered quadrature.

    The rule is recentered at the located mode with scale
    ``(-d2 logjoint / dz2)^(-1/2)``; the result is deterministic for a fixed
    rule. The latent axis must be unconstrained (callers with positive
    latents substitute ``z = exp(u)`` first).
    """
    z_hat = _locate_mode(logjoint)
    _, d2 = _fd_derivs(logjoint, z_hat)
    if not d2 < 0:
        raise CurvatureNotNegative(f"curvature {d2!r} at mode {z_hat!r}")
    sigma = 1.0 / math.sqrt(-d2)
    points = z_hat + SQRT2 * sigma * rule.nodes
    log_terms = np.array([float(logjoint(p)) for p in points])
    if not np.all(np.isfinite(log_terms)):
        raise NonFiniteEvaluation("log-integrand not finite at a quadrature node")
    exponents = np.log(rule.weights) + log_terms + rule.nodes**2
    shift = float(np.max(exponents))
    total = float(np.sum(np.exp(exponents - shift)))
    return math.log(SQRT2 * sigma) + shift + math.log(total)
