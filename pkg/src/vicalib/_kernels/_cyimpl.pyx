# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled per-subject kernels.

Same API and semantics as ``_pyimpl``; that module is the readable
reference. Only the inner loops differ: everything here runs as plain C
over typed memoryviews.
"""

import numpy as np

from libc.math cimport exp, fabs, hypot, isfinite, log, log1p, sqrt

BACKEND_NAME = "cython"

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_SADDLE = 2
STATUS_LINESEARCH = 3

cdef double LOG_2PI = log(2.0 * 3.14159265358979323846)
cdef double SQRT2 = sqrt(2.0)
cdef double INV_SQRT_PI = 1.0 / sqrt(3.14159265358979323846)


cdef inline double c_expit(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double c_softplus(double x) noexcept nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef struct PsiTerms:
    double value
    double g_m
    double g_ls
    double h_mm
    double h_mls
    double h_lsls


cdef int _psi_terms(const double[::1] eta0, const double[::1] y, double tau,
                    double m, double ls, const double[::1] t,
                    const double[::1] w, PsiTerms* out) noexcept nogil:
    cdef Py_ssize_t n_visits = eta0.shape[0]
    cdef Py_ssize_t order = t.shape[0]
    cdef double s = exp(ls)
    cdef double sig2 = exp(tau)
    cdef double ydot = 0.0, total_sp = 0.0, total_resid = 0.0
    cdef double total_up = 0.0, total_p1 = 0.0, total_up1 = 0.0, total_uup1 = 0.0
    cdef double a, z, p, p1, u, wn
    cdef double e_sp, e_p, e_up, e_p1, e_up1, e_uup1
    cdef double v_s, v_ss
    cdef Py_ssize_t j, k
    for j in range(n_visits):
        a = eta0[j] + m
        ydot += y[j] * a
        e_sp = 0.0; e_p = 0.0; e_up = 0.0; e_p1 = 0.0; e_up1 = 0.0; e_uup1 = 0.0
        for k in range(order):
            u = SQRT2 * t[k]
            wn = w[k] * INV_SQRT_PI
            z = a + s * u
            p = c_expit(z)
            p1 = p * (1.0 - p)
            e_sp += wn * c_softplus(z)
            e_p += wn * p
            e_up += wn * u * p
            e_p1 += wn * p1
            e_up1 += wn * u * p1
            e_uup1 += wn * u * u * p1
        total_sp += e_sp
        total_resid += y[j] - e_p
        total_up += e_up
        total_p1 += e_p1
        total_up1 += e_up1
        total_uup1 += e_uup1
    out.value = (ydot - total_sp - 0.5 * (LOG_2PI + tau)
                 - (m * m + s * s) / (2.0 * sig2)
                 + 0.5 * (LOG_2PI + 1.0) + ls)
    out.g_m = total_resid - m / sig2
    v_s = -total_up - s / sig2 + 1.0 / s
    out.g_ls = s * v_s
    out.h_mm = -total_p1 - 1.0 / sig2
    out.h_mls = -s * total_up1
    v_ss = -total_uup1 - 1.0 / sig2 - 1.0 / (s * s)
    out.h_lsls = s * s * v_ss + out.g_ls
    return 0


def glmm_psi_terms(eta0, y, double tau, double m, double ls, nodes, weights):
    cdef const double[::1] e = np.ascontiguousarray(eta0, dtype=np.float64)
    cdef const double[::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef PsiTerms terms
    _psi_terms(e, yy, tau, m, ls, t, w, &terms)
    grad = np.array([terms.g_m, terms.g_ls])
    hess = np.array([[terms.h_mm, terms.h_mls], [terms.h_mls, terms.h_lsls]])
    return terms.value, grad, hess


def glmm_value(eta0, y, double tau, double m, double ls, nodes, weights):
    cdef const double[::1] e = np.ascontiguousarray(eta0, dtype=np.float64)
    cdef const double[::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n_visits = e.shape[0]
    cdef Py_ssize_t order = t.shape[0]
    cdef double s = exp(ls)
    cdef double sig2 = exp(tau)
    cdef double ydot = 0.0, total_sp = 0.0
    cdef double a, e_sp
    cdef Py_ssize_t j, k
    for j in range(n_visits):
        a = e[j] + m
        ydot += yy[j] * a
        e_sp = 0.0
        for k in range(order):
            e_sp += w[k] * INV_SQRT_PI * c_softplus(a + s * SQRT2 * t[k])
        total_sp += e_sp
    return (ydot - total_sp - 0.5 * (LOG_2PI + tau)
            - (m * m + s * s) / (2.0 * sig2)
            + 0.5 * (LOG_2PI + 1.0) + ls)


def glmm_profile(eta0, y, double tau, double m0, double ls0, nodes, weights,
                 double tol, int max_iter):
    cdef const double[::1] e = np.ascontiguousarray(eta0, dtype=np.float64)
    cdef const double[::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double m = m0, ls = ls0
    cdef PsiTerms cur, trial
    cdef double gnorm, det, d0, d1, slope, alpha, scale, m_try, ls_try, slack
    cdef int it, half
    cdef bint accepted
    _psi_terms(e, yy, tau, m, ls, t, w, &cur)
    for it in range(1, max_iter + 1):
        gnorm = max(fabs(cur.g_m), fabs(cur.g_ls))
        if gnorm <= tol:
            det = cur.h_mm * cur.h_lsls - cur.h_mls * cur.h_mls
            if cur.h_mm < 0.0 and det > 0.0:
                return m, ls, STATUS_OK, it - 1
            return m, ls, STATUS_SADDLE, it - 1
        det = cur.h_mm * cur.h_lsls - cur.h_mls * cur.h_mls
        if cur.h_mm < 0.0 and det > 0.0:
            d0 = -(cur.h_lsls * cur.g_m - cur.h_mls * cur.g_ls) / det
            d1 = -(-cur.h_mls * cur.g_m + cur.h_mm * cur.g_ls) / det
        else:
            scale = 1.0 + hypot(cur.g_m, cur.g_ls)
            d0 = cur.g_m / scale
            d1 = cur.g_ls / scale
        slope = cur.g_m * d0 + cur.g_ls * d1
        if slope <= 0.0:
            d0 = cur.g_m
            d1 = cur.g_ls
            slope = cur.g_m * cur.g_m + cur.g_ls * cur.g_ls
        alpha = 1.0
        accepted = False
        # round-off slack keeps sub-ulp Newton steps acceptable near the optimum
        slack = 1e-14 * (1.0 + fabs(cur.value))
        for half in range(60):
            m_try = m + alpha * d0
            ls_try = ls + alpha * d1
            _psi_terms(e, yy, tau, m_try, ls_try, t, w, &trial)
            if isfinite(trial.value) and trial.value >= cur.value + 1e-4 * alpha * slope - slack:
                m = m_try
                ls = ls_try
                cur = trial
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            gnorm = max(fabs(cur.g_m), fabs(cur.g_ls))
            if gnorm <= tol:
                det = cur.h_mm * cur.h_lsls - cur.h_mls * cur.h_mls
                if cur.h_mm < 0.0 and det > 0.0:
                    return m, ls, STATUS_OK, it
            return m, ls, STATUS_LINESEARCH, it
    return m, ls, STATUS_MAXITER, max_iter


def glmm_theta_parts(eta0, y, double tau, double m, double ls, nodes, weights):
    cdef const double[::1] e = np.ascontiguousarray(eta0, dtype=np.float64)
    cdef const double[::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n_visits = e.shape[0]
    cdef Py_ssize_t order = t.shape[0]
    cdef double s = exp(ls)
    cdef double sig2 = exp(tau)
    resid_arr = np.empty(n_visits)
    cdef double[::1] resid = resid_arr
    cdef double ydot = 0.0, total_sp = 0.0
    cdef double a, z, e_sp, e_p, wn
    cdef Py_ssize_t j, k
    for j in range(n_visits):
        a = e[j] + m
        ydot += yy[j] * a
        e_sp = 0.0
        e_p = 0.0
        for k in range(order):
            wn = w[k] * INV_SQRT_PI
            z = a + s * SQRT2 * t[k]
            e_sp += wn * c_softplus(z)
            e_p += wn * c_expit(z)
        total_sp += e_sp
        resid[j] = yy[j] - e_p
    value = (ydot - total_sp - 0.5 * (LOG_2PI + tau)
             - (m * m + s * s) / (2.0 * sig2)
             + 0.5 * (LOG_2PI + 1.0) + ls)
    g_tau = -0.5 + (m * m + s * s) / (2.0 * sig2)
    return value, resid_arr, g_tau


def glmm_block_moments(eta0, double tau, double m, double ls, nodes, weights):
    cdef const double[::1] e = np.ascontiguousarray(eta0, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n_visits = e.shape[0]
    cdef Py_ssize_t order = t.shape[0]
    cdef double s = exp(ls)
    pbar_arr = np.empty(n_visits)
    b1_arr = np.empty(n_visits)
    c0_arr = np.empty(n_visits)
    c1_arr = np.empty(n_visits)
    c2_arr = np.empty(n_visits)
    cdef double[::1] pbar = pbar_arr
    cdef double[::1] b1 = b1_arr
    cdef double[::1] c0 = c0_arr
    cdef double[::1] c1 = c1_arr
    cdef double[::1] c2 = c2_arr
    cdef double a, z, p, p1, u, wn
    cdef double e_p, e_up, e_p1, e_up1, e_uup1
    cdef Py_ssize_t j, k
    for j in range(n_visits):
        a = e[j] + m
        e_p = 0.0; e_up = 0.0; e_p1 = 0.0; e_up1 = 0.0; e_uup1 = 0.0
        for k in range(order):
            u = SQRT2 * t[k]
            wn = w[k] * INV_SQRT_PI
            z = a + s * u
            p = c_expit(z)
            p1 = p * (1.0 - p)
            e_p += wn * p
            e_up += wn * u * p
            e_p1 += wn * p1
            e_up1 += wn * u * p1
            e_uup1 += wn * u * u * p1
        pbar[j] = e_p
        b1[j] = e_up
        c0[j] = e_p1
        c1[j] = e_up1
        c2[j] = e_uup1
    return pbar_arr, b1_arr, c0_arr, c1_arr, c2_arr


cdef double _logjoint(const double[::1] eta0, const double[::1] y, double tau,
                      double sig2, double gamma) noexcept nogil:
    cdef Py_ssize_t n_visits = eta0.shape[0]
    cdef double total = 0.0
    cdef double z
    cdef Py_ssize_t j
    for j in range(n_visits):
        z = eta0[j] + gamma
        total += y[j] * z - c_softplus(z)
    return total - gamma * gamma / (2.0 * sig2) - 0.5 * (LOG_2PI + tau)


def glmm_marginal(eta0, y, double tau, nodes, weights, double tol=1e-12,
                  int max_iter=100):
    cdef const double[::1] e = np.ascontiguousarray(eta0, dtype=np.float64)
    cdef const double[::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n_visits = e.shape[0]
    cdef Py_ssize_t order = t.shape[0]
    cdef double sig2 = exp(tau)
    cdef double gamma = 0.0
    cdef double lj = _logjoint(e, yy, tau, sig2, gamma)
    cdef double p, d1, d2, step, alpha, gamma_try, lj_try, moved
    cdef bint converged = False
    cdef Py_ssize_t it, j, half, k
    for it in range(max_iter):
        d1 = -gamma / sig2
        d2 = -1.0 / sig2
        for j in range(n_visits):
            p = c_expit(e[j] + gamma)
            d1 += yy[j] - p
            d2 -= p * (1.0 - p)
        step = -d1 / d2
        alpha = 1.0
        for half in range(60):
            gamma_try = gamma + alpha * step
            lj_try = _logjoint(e, yy, tau, sig2, gamma_try)
            if lj_try >= lj - 1e-14 * max(1.0, fabs(lj)):
                break
            alpha *= 0.5
        gamma_try = gamma + alpha * step
        moved = fabs(gamma_try - gamma)
        gamma = gamma_try
        lj = _logjoint(e, yy, tau, sig2, gamma)
        if moved <= tol * max(1.0, fabs(gamma)):
            converged = True
            break
    if not converged:
        return float("nan"), STATUS_MAXITER

    d2 = -1.0 / sig2
    for j in range(n_visits):
        p = c_expit(e[j] + gamma)
        d2 -= p * (1.0 - p)
    cdef double sigma_hat = 1.0 / sqrt(-d2)
    cdef double shift = -1e308
    cdef double expo
    exponents = np.empty(order)
    cdef double[::1] ex = exponents
    for k in range(order):
        expo = log(w[k]) + _logjoint(e, yy, tau, sig2, gamma + SQRT2 * sigma_hat * t[k]) + t[k] * t[k]
        ex[k] = expo
        if expo > shift:
            shift = expo
    cdef double total = 0.0
    for k in range(order):
        total += exp(ex[k] - shift)
    return log(SQRT2 * sigma_hat) + shift + log(total), STATUS_OK
