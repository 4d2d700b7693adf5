"""Numpy implementation of the per-subject hot kernels.

Mirrors the API of the compiled backend (``_cyimpl``). Each function works
on one subject of a logistic random-intercept model: ``eta0 = X @ beta`` is
the fixed-effect linear predictor per visit, ``tau = log sigma^2`` the
variance parameter, ``(m, ls)`` the variational mean and log standard
deviation, and ``nodes / weights`` a physicists' Gauss-Hermite rule.

Status codes returned by the iterative kernels:
``0`` converged, ``1`` iteration budget exhausted, ``2`` stationary point is
not a maximum, ``3`` line search failed.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND_NAME = "numpy"

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_SADDLE = 2
STATUS_LINESEARCH = 3


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def glmm_psi_terms(eta0, y, tau, m, ls, nodes, weights):
    """ELBO value, gradient and Hessian in ``(m, log s)`` for one subject."""
    s = math.exp(ls)
    sig2 = math.exp(tau)
    u = _SQRT2 * nodes  # standardized normal nodes
    wn = weights * _INV_SQRT_PI
    z = (eta0 + m)[:, None] + s * u[None, :]
    p = _expit(z)
    p1 = p * (1.0 - p)

    e_sp = _softplus(z) @ wn
    e_p = p @ wn
    e_up = (p * u) @ wn
    e_p1 = p1 @ wn
    e_up1 = (p1 * u) @ wn
    e_uup1 = (p1 * u * u) @ wn

    value = (
        float(y @ (eta0 + m))
        - float(np.sum(e_sp))
        - 0.5 * (_LOG_2PI + tau)
        - (m * m + s * s) / (2.0 * sig2)
        + 0.5 * (_LOG_2PI + 1.0)
        + ls
    )
    g_m = float(np.sum(y - e_p)) - m / sig2
    v_s = -float(np.sum(e_up)) - s / sig2 + 1.0 / s
    g_ls = s * v_s

    h_mm = -float(np.sum(e_p1)) - 1.0 / sig2
    h_mls = s * (-float(np.sum(e_up1)))
    v_ss = -float(np.sum(e_uup1)) - 1.0 / sig2 - 1.0 / (s * s)
    h_lsls = s * s * v_ss + g_ls

    grad = np.array([g_m, g_ls])
    hess = np.array([[h_mm, h_mls], [h_mls, h_lsls]])
    return value, grad, hess


def glmm_value(eta0, y, tau, m, ls, nodes, weights):
    s = math.exp(ls)
    sig2 = math.exp(tau)
    wn = weights * _INV_SQRT_PI
    z = (eta0 + m)[:, None] + s * _SQRT2 * nodes[None, :]
    e_sp = _softplus(z) @ wn
    return (
        float(y @ (eta0 + m))
        - float(np.sum(e_sp))
        - 0.5 * (_LOG_2PI + tau)
        - (m * m + s * s) / (2.0 * sig2)
        + 0.5 * (_LOG_2PI + 1.0)
        + ls
    )


def glmm_profile(eta0, y, tau, m0, ls0, nodes, weights, tol, max_iter):
    """Safeguarded Newton ascent on the per-subject ELBO over ``(m, log s)``.

    Returns ``(m, ls, status, n_iter)``.
    """
    m, ls = float(m0), float(ls0)
    value, grad, hess = glmm_psi_terms(eta0, y, tau, m, ls, nodes, weights)
    for it in range(1, max_iter + 1):
        gnorm = max(abs(grad[0]), abs(grad[1]))
        if gnorm <= tol:
            det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
            if hess[0, 0] < 0.0 and det > 0.0:
                return m, ls, STATUS_OK, it - 1
            return m, ls, STATUS_SADDLE, it - 1
        det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
        if hess[0, 0] < 0.0 and det > 0.0:
            d0 = -(hess[1, 1] * grad[0] - hess[0, 1] * grad[1]) / det
            d1 = -(-hess[0, 1] * grad[0] + hess[0, 0] * grad[1]) / det
        else:
            scale = 1.0 + math.hypot(grad[0], grad[1])
            d0, d1 = grad[0] / scale, grad[1] / scale
        slope = grad[0] * d0 + grad[1] * d1
        if slope <= 0.0:
            d0, d1 = grad[0], grad[1]
            slope = grad[0] ** 2 + grad[1] ** 2
        alpha = 1.0
        accepted = False
        # round-off slack keeps sub-ulp Newton steps acceptable near the optimum
        slack = 1e-14 * (1.0 + abs(value))
        for _ in range(60):
            m_try = m + alpha * d0
            ls_try = ls + alpha * d1
            v_try, g_try, h_try = glmm_psi_terms(
                eta0, y, tau, m_try, ls_try, nodes, weights
            )
            if math.isfinite(v_try) and v_try >= value + 1e-4 * alpha * slope - slack:
                m, ls, value, grad, hess = m_try, ls_try, v_try, g_try, h_try
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            gnorm = max(abs(grad[0]), abs(grad[1]))
            if gnorm <= 1e-6:  # stalled at round-off next to the optimum
                det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
                if hess[0, 0] < 0.0 and det > 0.0 and gnorm <= tol:
                    return m, ls, STATUS_OK, it
            return m, ls, STATUS_LINESEARCH, it
    return m, ls, STATUS_MAXITER, max_iter


def glmm_theta_parts(eta0, y, tau, m, ls, nodes, weights):
    """Pieces of the ELBO gradient in ``theta = (beta, tau)``.

    Returns ``(value, resid, g_tau)`` where ``resid[j] = y_j - E[expit]``;
    the beta gradient is ``X.T @ resid`` assembled by the caller.
    """
    s = math.exp(ls)
    sig2 = math.exp(tau)
    wn = weights * _INV_SQRT_PI
    z = (eta0 + m)[:, None] + s * _SQRT2 * nodes[None, :]
    e_p = _expit(z) @ wn
    e_sp = _softplus(z) @ wn
    value = (
        float(y @ (eta0 + m))
        - float(np.sum(e_sp))
        - 0.5 * (_LOG_2PI + tau)
        - (m * m + s * s) / (2.0 * sig2)
        + 0.5 * (_LOG_2PI + 1.0)
        + ls
    )
    resid = y - e_p
    g_tau = -0.5 + (m * m + s * s) / (2.0 * sig2)
    return value, resid, g_tau


def glmm_block_moments(eta0, tau, m, ls, nodes, weights):
    """Per-visit moments used for the second-derivative blocks.

    Returns ``(pbar, b1, c0, c1, c2)`` with ``pbar = E[expit]``,
    ``b1 = E[u expit]``, ``c0 = E[expit']``, ``c1 = E[u expit']``,
    ``c2 = E[u^2 expit']`` under the variational normal.
    """
    s = math.exp(ls)
    u = _SQRT2 * nodes
    wn = weights * _INV_SQRT_PI
    z = (eta0 + m)[:, None] + s * u[None, :]
    p = _expit(z)
    p1 = p * (1.0 - p)
    pbar = p @ wn
    b1 = (p * u) @ wn
    c0 = p1 @ wn
    c1 = (p1 * u) @ wn
    c2 = (p1 * u * u) @ wn
    return pbar, b1, c0, c1, c2


def glmm_marginal(eta0, y, tau, nodes, weights, tol=1e-12, max_iter=100):
    """Log marginal likelihood of one subject by recentered quadrature.

    The integrand over the random intercept is strictly log-concave, so the
    mode search is plain damped Newton with analytic derivatives. Returns
    ``(value, status)``.
    """
    sig2 = math.exp(tau)

    def logjoint(gamma):
        z = eta0 + gamma
        return (
            float(y @ z)
            - float(np.sum(_softplus(z)))
            - gamma * gamma / (2.0 * sig2)
            - 0.5 * (_LOG_2PI + tau)
        )

    gamma = 0.0
    lj = logjoint(gamma)
    converged = False
    for _ in range(max_iter):
        p = _expit(eta0 + gamma)
        d1 = float(np.sum(y - p)) - gamma / sig2
        d2 = -float(np.sum(p * (1.0 - p))) - 1.0 / sig2
        step = -d1 / d2
        alpha = 1.0
        for _ in range(60):
            gamma_try = gamma + alpha * step
            lj_try = logjoint(gamma_try)
            if lj_try >= lj - 1e-14 * max(1.0, abs(lj)):
                break
            alpha *= 0.5
        gamma_new = gamma + alpha * step
        moved = abs(gamma_new - gamma)
        gamma, lj = gamma_new, logjoint(gamma_new)
        if moved <= tol * max(1.0, abs(gamma)):
            converged = True
            break
    if not converged:
        return math.nan, STATUS_MAXITER

    p = _expit(eta0 + gamma)
    d2 = -float(np.sum(p * (1.0 - p))) - 1.0 / sig2
    sigma_hat = 1.0 / math.sqrt(-d2)
    points = gamma + _SQRT2 * sigma_hat * nodes
    log_terms = np.array([logjoint(pt) for pt in points])
    exponents = np.log(weights) + log_terms + nodes**2
    shift = float(np.max(exponents))
    total = float(np.sum(np.exp(exponents - shift)))
    value = math.log(_SQRT2 * sigma_hat) + shift + math.log(total)
    return value, STATUS_OK
