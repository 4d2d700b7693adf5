"""One Newton step from the variational estimate toward the maximum of the
true marginal likelihood.

Given a root-n-consistent starting estimate, a single Newton step on the
marginal log-likelihood inherits the first-order efficiency of the full
maximum-likelihood estimator while paying for only one score/information
evaluation. The observed information here is the average outer product of
per-datum scores (a negative-Hessian variant is available behind the
``info`` flag for sensitivity checks). With that positive semidefinite
information, the ascent step is ``theta + I^{-1} S``; the updated marginal
log-likelihood is recorded so callers can verify the step did not descend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfoSingular, NotPositiveDefinite, Singular
from .numkit import as_vec, chol_solve, quantile, sym_inverse
from .vcore import Dataset, FitResult, VariationalModel

SCORE_FD_STEP = 1e-5


@dataclass(frozen=True)
class OneStepResult:
    theta_start: np.ndarray
    score: np.ndarray
    obs_info: np.ndarray
    theta_onestep: np.ndarray
    ml_cov: np.ndarray  # inverse information over n
    step_norm: float
    loglik_start: float
    loglik_onestep: float
    info_kind: str
    n: int


def marginal_score(model: VariationalModel, theta, datum) -> np.ndarray:
    """Score of the marginal log-likelihood for one datum.

    Uses the model's analytic score when present, otherwise central finite
    differences of the (usually quadrature-based) marginal log-likelihood
    with steps ``1e-5 * max(1, |theta_k|)``.
    """
    theta = as_vec(theta, dim=model.dim_theta)
    if model.marginal_score is not None:
        return np.asarray(model.marginal_score(theta, datum), dtype=float)
    if model.marginal_loglik is None:
        raise ValueError("model exposes neither marginal_score nor marginal_loglik")
    grad = np.empty(model.dim_theta)
    for k in range(model.dim_theta):
        h = SCORE_FD_STEP * max(1.0, abs(theta[k]))
        tp = theta.copy()
        tm = theta.copy()
        tp[k] += h
        tm[k] -= h
        grad[k] = (
            model.marginal_loglik(tp, datum) - model.marginal_loglik(tm, datum)
        ) / (2.0 * h)
    return grad


def score_and_info(
    model: VariationalModel, theta, data: Dataset, info: str = "opg"
) -> tuple[np.ndarray, np.ndarray]:
    """Average score and observed information over the dataset.

    ``info="opg"`` (default) averages score outer products and is positive
    semidefinite by construction; ``info="hessian"`` uses the negated
    finite-difference Jacobian of the score instead.
    """
    theta = as_vec(theta, dim=model.dim_theta)
    d = model.dim_theta
    score_sum = np.zeros(d)
    info_sum = np.zeros((d, d))
    for i, datum in enumerate(data):
        try:
            s_i = marginal_score(model, theta, datum)
        except Exception as exc:
            raise type(exc)(f"datum {i}: {exc}") from exc
        score_sum += s_i
        if info == "opg":
            info_sum += np.outer(s_i, s_i)
    score = score_sum / data.n
    if info == "opg":
        information = info_sum / data.n
    elif info == "hessian":
        jac = np.empty((d, d))
        for k in range(d):
            h = SCORE_FD_STEP * max(1.0, abs(theta[k]))
            tp = theta.copy()
            tm = theta.copy()
            tp[k] += h
            tm[k] -= h
            sp = sum(marginal_score(model, tp, datum) for datum in data) / data.n
            sm = sum(marginal_score(model, tm, datum) for datum in data) / data.n
            jac[:, k] = (sp - sm) / (2.0 * h)
        information = -0.5 * (jac + jac.T)
    else:
        raise ValueError(f"unknown info kind {info!r}")
    return score, 0.5 * (information + information.T)


def one_step(
    model: VariationalModel,
    fit: FitResult | np.ndarray,
    data: Dataset,
    info: str = "opg",
) -> OneStepResult:
    """Newton ascent step ``theta + I^{-1} S`` from the fitted estimate."""
    theta = fit.theta_hat if isinstance(fit, FitResult) else as_vec(fit)
    theta = as_vec(theta, dim=model.dim_theta)
    score, information = score_and_info(model, theta, data, info=info)
    try:
        delta = chol_solve(information, score)
        inv_info = sym_inverse(information)
    except (NotPositiveDefinite, Singular) as exc:
        raise InfoSingular(f"observed information not invertible: {exc}") from exc
    theta_one = theta + delta
    loglik_start = _mean_marginal(model, theta, data)
    loglik_one = _mean_marginal(model, theta_one, data)
    return OneStepResult(
        theta_start=theta,
        score=score,
        obs_info=information,
        theta_onestep=theta_one,
        ml_cov=inv_info / data.n,
        step_norm=float(np.linalg.norm(delta)),
        loglik_start=loglik_start,
        loglik_onestep=loglik_one,
        info_kind=info,
        n=data.n,
    )


def _mean_marginal(model, theta, data) -> float:
    if model.marginal_loglik is None:
        return float("nan")
    return float(sum(model.marginal_loglik(theta, d) for d in data) / data.n)


def ml_wald_intervals(result: OneStepResult, level: float) -> list[tuple[float, float]]:
    """Intervals from the corrected estimate and ``I^{-1} / n``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    z = quantile("normal", 0.5 * (1.0 + level))
    half = z * np.sqrt(np.diag(result.ml_cov))
    return [
        (float(t - h), float(t + h))
        for t, h in zip(result.theta_onestep, half)
    ]
