"""Plug-in sandwich covariance for the profiled variational estimator.

The outer curvature matrix averages, per datum,

    tt - tp @ pp^{-1} @ tp'

where ``tt``, ``tp`` and ``pp`` are the second-derivative blocks of the
criterion term ``v`` in (theta, theta), (theta, psi) and (psi, psi) at the
inner optimum; this equals the full second derivative of the profiled
criterion by the implicit-function identity. The gradient outer-product
matrix uses the envelope gradient (the theta-partial of ``v`` at the inner
optimum). Their combination ``A^{-1} B A^{-1}`` is the model-robust
asymptotic covariance: it stays valid when the data do not come from the
model family.

Blocks default to central differences of the model's gradients; models may
supply exact blocks via ``deriv_blocks``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import numkit
from .errors import (
    AHatSingular,
    InnerHessianSingular,
    NegativeVariance,
    NotPositiveDefinite,
    Singular,
    VHatSingular,
)
from .numkit import as_sym, as_vec, hess_fd, quantile
from .vcore import Dataset, FitResult, VariationalModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SandwichEstimate:
    """Curvature, gradient-outer-product and sandwich matrices at theta."""

    a_hat: np.ndarray
    b_hat: np.ndarray
    v_hat: np.ndarray
    n: int
    theta_at: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a_hat", as_sym(self.a_hat))
        object.__setattr__(self, "b_hat", as_sym(self.b_hat))
        object.__setattr__(self, "v_hat", as_sym(self.v_hat))
        object.__setattr__(self, "theta_at", as_vec(self.theta_at))
        min_eig = float(np.min(np.linalg.eigvalsh(self.b_hat)))
        scale = max(1.0, float(np.max(np.abs(self.b_hat))))
        if min_eig < -1e-10 * scale:
            raise ValueError(f"b_hat not positive semidefinite (min eig {min_eig:.3e})")


def _uses_default_gradients(model: VariationalModel) -> bool:
    return (
        type(model).grad_theta_v is VariationalModel.grad_theta_v
        and type(model).grad_psi_v is VariationalModel.grad_psi_v
    )


def _blocks_from_gradients(model, theta, psi, datum):
    """Jacobians of the analytic gradients by central differences."""
    d, q = model.dim_theta, model.dim_psi
    tt = np.empty((d, d))
    tp = np.empty((d, q))
    pp = np.empty((q, q))
    for j in range(d):
        h = numkit.GRAD_STEP * max(1.0, abs(theta[j]))
        tp_ = theta.copy()
        tm_ = theta.copy()
        tp_[j] += h
        tm_[j] -= h
        gp = np.asarray(model.grad_theta_v(tp_, psi, datum), dtype=float)
        gm = np.asarray(model.grad_theta_v(tm_, psi, datum), dtype=float)
        tt[:, j] = (gp - gm) / (2.0 * h)
    for l in range(q):
        h = numkit.GRAD_STEP * max(1.0, abs(psi[l]))
        pp_ = psi.copy()
        pm_ = psi.copy()
        pp_[l] += h
        pm_[l] -= h
        gp = np.asarray(model.grad_theta_v(theta, pp_, datum), dtype=float)
        gm = np.asarray(model.grad_theta_v(theta, pm_, datum), dtype=float)
        tp[:, l] = (gp - gm) / (2.0 * h)
        hp = np.asarray(model.grad_psi_v(theta, pp_, datum), dtype=float)
        hm = np.asarray(model.grad_psi_v(theta, pm_, datum), dtype=float)
        pp[:, l] = (hp - hm) / (2.0 * h)
    return 0.5 * (tt + tt.T), tp, 0.5 * (pp + pp.T)


def _blocks_from_values(model, theta, psi, datum):
    """Full Hessian of v over the stacked (theta, psi) vector, sliced."""
    d = model.dim_theta

    def stacked(z):
        return model.v(z[:d], z[d:], datum)

    full = hess_fd(stacked, np.concatenate([theta, psi]))
    return full[:d, :d], full[:d, d:], full[d:, d:]


def criterion_blocks(model, theta, psi, datum):
    """Second-derivative blocks (tt, tp, pp) of ``v`` at ``(theta, psi)``."""
    if model.deriv_blocks is not None:
        tt, tp, pp = model.deriv_blocks(theta, psi, datum)
        return np.asarray(tt, float), np.asarray(tp, float), np.asarray(pp, float)
    if _uses_default_gradients(model):
        return _blocks_from_values(model, theta, psi, datum)
    return _blocks_from_gradients(model, theta, psi, datum)


def a_hat(
    model: VariationalModel,
    fit: FitResult,
    data: Dataset,
    tolerate_failures: bool = False,
) -> np.ndarray:
    """Average curvature of the profiled criterion at the fitted estimate.

    A per-datum inner Hessian that stays singular through the jitter ladder
    raises :class:`InnerHessianSingular` carrying the datum index; with
    ``tolerate_failures`` up to 1% of datums may be dropped (logged).
    """
    theta = as_vec(fit.theta_hat, dim=model.dim_theta)
    total = np.zeros((model.dim_theta, model.dim_theta))
    dropped = []
    for i, datum in enumerate(data):
        psi = fit.psi_hat[i]
        tt, tp, pp = criterion_blocks(model, theta, psi, datum)
        try:
            factor, _ = numkit._chol_with_jitter(-pp)
        except NotPositiveDefinite as exc:
            if tolerate_failures:
                dropped.append(i)
                continue
            raise InnerHessianSingular(
                f"inner Hessian for datum {i} not invertible", datum_index=i
            ) from exc
        # tp @ pp^{-1} @ tp' = -tp @ (-pp)^{-1} @ tp'
        solved = scipy.linalg.cho_solve(factor, tp.T)
        total += tt + tp @ solved
    if dropped:
        if len(dropped) > max(1, data.n // 100):
            raise InnerHessianSingular(
                f"{len(dropped)} of {data.n} inner Hessians failed inversion",
                datum_index=dropped[0],
            )
        logger.warning(
            "dropped %d of %d datums with singular inner Hessians: %s",
            len(dropped), data.n, dropped[:10],
        )
    used = data.n - len(dropped)
    mean = total / used
    return 0.5 * (mean + mean.T)


def b_hat(model: VariationalModel, fit: FitResult, data: Dataset) -> np.ndarray:
    """Average outer product of per-datum envelope gradients."""
    theta = as_vec(fit.theta_hat, dim=model.dim_theta)
    total = np.zeros((model.dim_theta, model.dim_theta))
    for i, datum in enumerate(data):
        grad = np.asarray(model.grad_theta_v(theta, fit.psi_hat[i], datum), dtype=float)
        total += np.outer(grad, grad)
    mean = total / data.n
    return 0.5 * (mean + mean.T)


def sandwich_cov(
    model: VariationalModel,
    fit: FitResult,
    data: Dataset,
    tolerate_failures: bool = False,
) -> SandwichEstimate:
    """Sandwich covariance ``A^{-1} B A^{-1}``; the estimator covariance of
    the fitted theta is ``v_hat / n``."""
    a = a_hat(model, fit, data, tolerate_failures=tolerate_failures)
    b = b_hat(model, fit, data)
    try:
        a_inv = numkit.sym_inverse(a)
    except Singular as exc:
        raise AHatSingular(f"curvature matrix not invertible: {exc}") from exc
    v = a_inv @ b @ a_inv
    v = 0.5 * (v + v.T)
    return SandwichEstimate(a_hat=a, b_hat=b, v_hat=v, n=data.n, theta_at=fit.theta_hat)


def wald_intervals(est: SandwichEstimate, level: float) -> list[tuple[float, float]]:
    """Marginal Wald intervals ``theta_k +/- z * sqrt(v_kk / n)``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    diag = np.diag(est.v_hat)
    if np.any(diag < 0):
        bad = int(np.flatnonzero(diag < 0)[0])
        raise NegativeVariance(f"variance estimate for component {bad} is negative")
    z = quantile("normal", 0.5 * (1.0 + level))
    half = z * np.sqrt(diag / est.n)
    return [(float(t - h), float(t + h)) for t, h in zip(est.theta_at, half)]


def wald_joint_test(
    est: SandwichEstimate, theta0, level: float
) -> tuple[float, bool]:
    """Joint Wald statistic ``n (theta - theta0)' V^{-1} (theta - theta0)``
    against the chi-square cutoff at ``level``."""
    theta0 = as_vec(theta0, dim=est.theta_at.size)
    diff = est.theta_at - theta0
    try:
        factor = scipy.linalg.cho_factor(est.v_hat, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise VHatSingular(f"sandwich covariance not invertible: {exc}") from exc
    stat = float(est.n * diff @ scipy.linalg.cho_solve(factor, diff))
    cutoff = quantile("chi2", level, float(est.theta_at.size))
    return stat, stat > cutoff
