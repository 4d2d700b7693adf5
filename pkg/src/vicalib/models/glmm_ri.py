"""Logistic regression with a Gaussian random intercept per subject.

One datum is a subject: a fixed design matrix (one row per visit, carried
verbatim, including any intercept columns) and a binary response vector.
Conditional on the subject effect ``gamma ~ N(0, sigma^2)`` the responses
are independent Bernoulli with ``logit p = x' beta + gamma``. The
structural parameter is ``theta = (beta, log sigma^2)``; the variational
family over ``gamma`` is normal with ``psi = (m, log s)``.

The per-subject criterion, gradients, Hessians and the recentered
quadrature marginal all route through the kernel backend; only small
design-matrix algebra happens here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .._kernels import (
    STATUS_MAXITER,
    STATUS_OK,
    STATUS_SADDLE,
    glmm_block_moments,
    glmm_marginal,
    glmm_profile,
    glmm_psi_terms,
    glmm_theta_parts,
    glmm_value,
)
from ..errors import InnerDivergence, NoConvergence, QuadratureFailed, SaddleDetected
from ..numkit import RngStream, as_vec
from ..quadrature import DEFAULT_EXPECT_ORDER, DEFAULT_MARGINAL_ORDER, gh_rule
from ..vcore import Dataset, VariationalModel

SYNTHETIC_N_FIXED = 6


@dataclass(frozen=True)
class GlmmSubject:
    """Design matrix and binary responses for one subject."""

    design: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        design = np.ascontiguousarray(np.asarray(self.design, dtype=float))
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float))
        if design.ndim != 2:
            raise ValueError("design must be a 2-d matrix")
        if y.ndim != 1 or y.size != design.shape[0]:
            raise ValueError("y must have one entry per design row")
        if not np.all(np.isfinite(design)):
            raise ValueError("design entries must be finite")
        if y.size and not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("responses must be 0 or 1")
        design.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "y", y)

    @property
    def n_visits(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class MleResult:
    """Direct quadrature maximum-likelihood fit (comparison baseline)."""

    theta_hat: np.ndarray
    criterion_value: float  # mean marginal log-likelihood
    converged: bool
    boundary: bool
    n_iter: int
    trace: tuple


class GlmmRiModel(VariationalModel):
    """Random-intercept logistic model; ``dim_theta = n_fixed + 1``."""

    dim_psi = 2

    def __init__(
        self,
        n_fixed: int,
        gh_order: int = DEFAULT_EXPECT_ORDER,
        marginal_gh_order: int = DEFAULT_MARGINAL_ORDER,
    ):
        if n_fixed < 1:
            raise ValueError("need at least one fixed-effect column")
        self.n_fixed = n_fixed
        self.dim_theta = n_fixed + 1
        rule = gh_rule(gh_order)
        self._nodes, self._weights = rule.nodes, rule.weights
        mrule = gh_rule(marginal_gh_order)
        self._mnodes, self._mweights = mrule.nodes, mrule.weights

    # --- helpers ---------------------------------------------------------

    def _split(self, theta):
        theta = as_vec(theta, dim=self.dim_theta)
        return theta[: self.n_fixed], float(theta[-1])

    def _eta0(self, beta, subject: GlmmSubject) -> np.ndarray:
        return subject.design @ beta

    # --- criterion and derivatives ------------------------------------------

    def v(self, theta, psi, datum: GlmmSubject) -> float:
        beta, tau = self._split(theta)
        return glmm_value(
            self._eta0(beta, datum), datum.y, tau,
            float(psi[0]), float(psi[1]), self._nodes, self._weights,
        )

    def grad_theta_v(self, theta, psi, datum: GlmmSubject) -> np.ndarray:
        beta, tau = self._split(theta)
        _, resid, g_tau = glmm_theta_parts(
            self._eta0(beta, datum), datum.y, tau,
            float(psi[0]), float(psi[1]), self._nodes, self._weights,
        )
        return np.concatenate([datum.design.T @ resid, [g_tau]])

    def grad_psi_v(self, theta, psi, datum: GlmmSubject) -> np.ndarray:
        beta, tau = self._split(theta)
        _, grad, _ = glmm_psi_terms(
            self._eta0(beta, datum), datum.y, tau,
            float(psi[0]), float(psi[1]), self._nodes, self._weights,
        )
        return grad

    def hess_psi_v(self, theta, psi, datum: GlmmSubject) -> np.ndarray:
        beta, tau = self._split(theta)
        _, _, hess = glmm_psi_terms(
            self._eta0(beta, datum), datum.y, tau,
            float(psi[0]), float(psi[1]), self._nodes, self._weights,
        )
        return hess

    def psi_init(self, datum: GlmmSubject) -> np.ndarray:
        return np.zeros(2)

    def profile_psi_fast(self, theta, datum, psi0, tol, max_iter) -> np.ndarray:
        beta, tau = self._split(theta)
        m, ls, status, _ = glmm_profile(
            self._eta0(beta, datum), datum.y, tau,
            float(psi0[0]), float(psi0[1]),
            self._nodes, self._weights, tol, max_iter,
        )
        if status == STATUS_OK:
            return np.array([m, ls])
        if status == STATUS_SADDLE:
            raise SaddleDetected("inner stationary point is not a maximum")
        if status == STATUS_MAXITER:
            raise InnerDivergence(f"inner optimization exceeded {max_iter} iterations")
        raise InnerDivergence("inner line search stalled before tolerance")

    def deriv_blocks(self, theta, psi, datum: GlmmSubject):
        beta, tau = self._split(theta)
        m, ls = float(psi[0]), float(psi[1])
        s = math.exp(ls)
        sig2 = math.exp(tau)
        x = datum.design
        _, b1, c0, c1, c2 = glmm_block_moments(
            self._eta0(beta, datum), tau, m, ls, self._nodes, self._weights
        )
        d = self.dim_theta
        tt = np.zeros((d, d))
        tt[:-1, :-1] = -(x.T * c0) @ x
        tt[-1, -1] = -(m * m + s * s) / (2.0 * sig2)
        tp = np.zeros((d, 2))
        tp[:-1, 0] = -(x.T @ c0)
        tp[:-1, 1] = -s * (x.T @ c1)
        tp[-1, 0] = m / sig2
        tp[-1, 1] = s * s / sig2
        sum_c0 = float(np.sum(c0))
        sum_c1 = float(np.sum(c1))
        sum_c2 = float(np.sum(c2))
        sum_b1 = float(np.sum(b1))
        v_s = -sum_b1 - s / sig2 + 1.0 / s
        v_ss = -sum_c2 - 1.0 / sig2 - 1.0 / (s * s)
        pp = np.array(
            [
                [-sum_c0 - 1.0 / sig2, -s * sum_c1],
                [-s * sum_c1, s * s * v_ss + s * v_s],
            ]
        )
        return tt, tp, pp

    # --- marginal likelihood ---------------------------------------------------

    def marginal_loglik(self, theta, datum: GlmmSubject) -> float:
        beta, tau = self._split(theta)
        value, status = glmm_marginal(
            self._eta0(beta, datum), datum.y, tau, self._mnodes, self._mweights
        )
        if status != STATUS_OK:
            raise QuadratureFailed("marginal mode search did not converge")
        return value

    # --- simulation ----------------------------------------------------------------

    def simulate(self, theta, template_datum: GlmmSubject, rng: RngStream) -> GlmmSubject:
        beta, tau = self._split(theta)
        gen = rng.generator()
        sigma = math.exp(0.5 * tau)
        gamma = gen.normal(0.0, sigma)
        eta = self._eta0(beta, template_datum) + gamma
        probs = 1.0 / (1.0 + np.exp(-eta))
        y = (gen.random(template_datum.n_visits) < probs).astype(float)
        return GlmmSubject(design=template_datum.design, y=y)

    # --- engine hooks -------------------------------------------------------------------

    def theta_init(self, data: Dataset) -> np.ndarray:
        total = sum(float(np.sum(d.y)) for d in data)
        visits = sum(d.n_visits for d in data)
        p_bar = min(max(total / max(visits, 1), 1e-3), 1.0 - 1e-3)
        logit = math.log(p_bar / (1.0 - p_bar))
        rows = np.vstack([d.design for d in data])
        target = np.full(rows.shape[0], logit)
        beta, *_ = np.linalg.lstsq(rows, target, rcond=None)
        return np.concatenate([beta, [0.0]])

    def batch_value_grad(self, theta, data: Dataset, warm, config):
        beta, tau = self._split(theta)
        n = data.n
        if warm is None:
            warm = np.zeros((n, 2))
        psi_mat = np.empty((n, 2))
        total = 0.0
        grad = np.zeros(self.dim_theta)
        for i, subject in enumerate(data):
            eta0 = subject.design @ beta
            m, ls, status, _ = glmm_profile(
                eta0, subject.y, tau, warm[i, 0], warm[i, 1],
                self._nodes, self._weights,
                config.inner_tol, config.max_inner_iter,
            )
            if status != STATUS_OK:
                # retry once from the cold start before giving up
                m, ls, status, _ = glmm_profile(
                    eta0, subject.y, tau, 0.0, 0.0,
                    self._nodes, self._weights,
                    config.inner_tol, config.max_inner_iter,
                )
            if status != STATUS_OK:
                err = (
                    SaddleDetected if status == STATUS_SADDLE else InnerDivergence
                )("inner profiling failed", datum_index=i)
                raise err
            psi_mat[i, 0], psi_mat[i, 1] = m, ls
            value, resid, g_tau = glmm_theta_parts(
                eta0, subject.y, tau, m, ls, self._nodes, self._weights
            )
            total += value
            grad[: self.n_fixed] += subject.design.T @ resid
            grad[-1] += g_tau
        return total / n, grad / n, psi_mat

    # --- direct maximum likelihood --------------------------------------------------------

    def direct_mle(
        self,
        data: Dataset,
        theta0=None,
        tau_bounds: tuple[float, float] = (-12.0, 8.0),
        gtol: float = 1e-7,
        max_iter: int = 500,
        fd_step: float = 1e-5,
    ) -> MleResult:
        """Quasi-Newton maximization of the quadrature marginal likelihood.

        The variance parameter is box-constrained; an estimate pinned at the
        lower bound (data compatible with sigma^2 = 0) is flagged via
        ``boundary`` instead of failing.
        """
        theta0 = (
            as_vec(theta0, dim=self.dim_theta)
            if theta0 is not None
            else self.theta_init(data)
        )
        theta0 = theta0.copy()
        theta0[-1] = min(max(theta0[-1], tau_bounds[0]), tau_bounds[1])
        n = data.n

        def objective(theta):
            return -sum(self.marginal_loglik(theta, d) for d in data) / n

        def gradient(theta):
            grad = np.empty(self.dim_theta)
            for k in range(self.dim_theta):
                h = fd_step * max(1.0, abs(theta[k]))
                tp = theta.copy()
                tm = theta.copy()
                tp[k] = min(theta[k] + h, tau_bounds[1]) if k == self.dim_theta - 1 else theta[k] + h
                tm[k] = max(theta[k] - h, tau_bounds[0]) if k == self.dim_theta - 1 else theta[k] - h
                grad[k] = (objective(tp) - objective(tm)) / (tp[k] - tm[k])
            return grad

        trace = []

        def on_iterate(xk):
            trace.append((len(trace) + 1, -objective(np.asarray(xk, dtype=float))))

        bounds = [(None, None)] * self.n_fixed + [tau_bounds]
        opt = scipy.optimize.minimize(
            objective,
            theta0,
            jac=gradient,
            method="L-BFGS-B",
            bounds=bounds,
            callback=on_iterate,
            options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-13},
        )
        theta = np.asarray(opt.x, dtype=float)
        if not opt.success and "ABNORMAL" in str(opt.message).upper():
            raise NoConvergence(f"direct likelihood optimization failed: {opt.message}")
        boundary = bool(theta[-1] <= tau_bounds[0] + 1e-6)
        return MleResult(
            theta_hat=theta,
            criterion_value=-float(opt.fun),
            converged=bool(opt.success),
            boundary=boundary,
            n_iter=int(opt.nit),
            trace=tuple(trace),
        )


def synthetic_templates(
    n_subjects: int,
    n_visits: int,
    rng: RngStream,
    age_min: float = 12.0,
    age_max: float = 35.0,
) -> Dataset:
    """Synthetic longitudinal designs: two sexes, visit ages spread over
    the study window, quadratic age trends with age scaled by 35. Columns:
    intercept, age, age^2 for sex 0, then the same three for sex 1.
    Responses are placeholders (zeros); simulate against these templates to
    generate outcomes.
    """
    gen = rng.generator()
    subjects = []
    for _ in range(n_subjects):
        sex = int(gen.integers(0, 2))
        ages = np.sort(gen.uniform(age_min, age_max, size=n_visits)) / 35.0
        block = np.column_stack([np.ones(n_visits), ages, ages**2])
        design = np.zeros((n_visits, 2 * block.shape[1]))
        if sex == 0:
            design[:, :3] = block
        else:
            design[:, 3:] = block
        subjects.append(GlmmSubject(design=design, y=np.zeros(n_visits)))
    return Dataset(data=tuple(subjects), source="synthetic-templates")


def bootstrap_templates(template: Dataset, n: int, rng: RngStream) -> Dataset:
    """Resample subject designs with replacement (responses dropped)."""
    gen = rng.generator()
    idx = gen.integers(0, template.n, size=n)
    subjects = tuple(
        GlmmSubject(design=template[i].design, y=np.zeros(template[i].n_visits))
        for i in idx
    )
    return Dataset(data=subjects, source=f"bootstrap({template.source})")
