"""Model interface and the two-stage variational estimation engine.

A model supplies one criterion term ``v(theta, psi; datum)`` per datum (a
single evidence-lower-bound summand) together with simulation and optional
closed forms. Estimation profiles the per-datum variational parameters
``psi_i`` out for each candidate ``theta`` (the inner stage) and maximizes
the averaged profiled criterion over ``theta`` (the outer stage).

Because each profiled ``psi_i`` is an interior maximum of ``v`` in ``psi``,
the gradient of the profiled criterion in ``theta`` equals the partial
gradient of ``v`` at the inner optimum; the outer stage uses this envelope
gradient, which is exact once the inner problems are solved to tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from . import numkit
from .errors import (
    InnerDivergence,
    NoConvergedStart,
    NotPositiveDefinite,
    SaddleDetected,
    VicalibError,
)
from .numkit import RngStream, as_vec, grad_fd


class VariationalModel:
    """Interface contract for a per-datum variational criterion.

    Required: ``dim_theta``, ``dim_psi``, :meth:`v`, :meth:`psi_init`,
    :meth:`simulate`. Optional capabilities are class attributes set to
    ``None`` here and overridden as methods by concrete models; callers test
    ``model.<name> is not None`` before use.
    """

    dim_theta: int
    dim_psi: int

    # optional capabilities -------------------------------------------------
    psi_closed_form: Optional[Callable] = None      # (theta, datum) -> psi
    hess_psi_v: Optional[Callable] = None           # (theta, psi, datum) -> (q, q)
    deriv_blocks: Optional[Callable] = None         # (theta, psi, datum) -> (tt, tp, pp)
    marginal_loglik: Optional[Callable] = None      # (theta, datum) -> float
    marginal_score: Optional[Callable] = None       # (theta, datum) -> (d,)
    profile_psi_fast: Optional[Callable] = None     # (theta, datum, psi0, tol, it) -> psi
    batch_value_grad: Optional[Callable] = None     # (theta, data, warm, cfg) -> (v, g, psi)

    def v(self, theta: np.ndarray, psi: np.ndarray, datum) -> float:
        raise NotImplementedError

    def psi_init(self, datum) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, theta: np.ndarray, template_datum, rng: RngStream):
        raise NotImplementedError

    def grad_theta_v(self, theta, psi, datum) -> np.ndarray:
        return grad_fd(lambda t: self.v(t, psi, datum), theta)

    def grad_psi_v(self, theta, psi, datum) -> np.ndarray:
        return grad_fd(lambda p: self.v(theta, p, datum), psi)

    def theta_init(self, data: "Dataset") -> np.ndarray:
        return np.zeros(self.dim_theta)


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of model-defined datums."""

    data: tuple
    source: str = "unspecified"

    def __post_init__(self):
        object.__setattr__(self, "data", tuple(self.data))
        if len(self.data) < 1:
            raise ValueError("a dataset must contain at least one datum")

    @property
    def n(self) -> int:
        return len(self.data)

    def __iter__(self):
        return iter(self.data)

    def __getitem__(self, i):
        return self.data[i]


@dataclass(frozen=True)
class FitConfig:
    """Tolerances and iteration budgets for the two-stage fit.

    ``inner_tol`` bounds the sup-norm of the per-datum criterion gradient in
    ``psi``; ``outer_tol`` the sup-norm of the averaged envelope gradient in
    ``theta``. ``mode`` selects quasi-Newton ascent on the profiled
    criterion (default) or the alternating scheme that cycles between the
    ``psi`` stage and the ``theta`` stage.
    """

    inner_tol: float = 1e-10
    outer_tol: float = 1e-8
    max_inner_iter: int = 200
    max_outer_iter: int = 500
    multistart_count: int = 5
    rng: RngStream = RngStream(0, 0)
    mode: str = "quasinewton"
    start_jitter_sd: float = 0.5

    def __post_init__(self):
        if self.inner_tol <= 0 or self.outer_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_inner_iter < 1 or self.max_outer_iter < 1:
            raise ValueError("iteration budgets must be positive")
        if self.multistart_count < 1:
            raise ValueError("multistart_count must be at least 1")
        if self.mode not in ("quasinewton", "alternating"):
            raise ValueError(f"unknown fit mode {self.mode!r}")


@dataclass(frozen=True)
class FitResult:
    """Converged estimate with per-datum variational parameters and trace."""

    theta_hat: np.ndarray
    psi_hat: np.ndarray  # (n, dim_psi), row i profiled at theta_hat
    criterion_value: float
    converged: bool
    trace: tuple  # (iteration, criterion, gradient sup-norm) triples
    config_echo: FitConfig
    start_index: int = 0


# ---------------------------------------------------------------------------
# inner stage
# ---------------------------------------------------------------------------

def _psi_hessian(model, theta, psi, datum) -> np.ndarray:
    if model.hess_psi_v is not None:
        return np.asarray(model.hess_psi_v(theta, psi, datum), dtype=float)
    q = psi.size
    hess = np.empty((q, q))
    for j in range(q):
        h = numkit.GRAD_STEP * max(1.0, abs(psi[j]))
        pp = psi.copy()
        pm = psi.copy()
        pp[j] += h
        pm[j] -= h
        gp = np.asarray(model.grad_psi_v(theta, pp, datum), dtype=float)
        gm = np.asarray(model.grad_psi_v(theta, pm, datum), dtype=float)
        hess[:, j] = (gp - gm) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def _check_inner_maximum(model, theta, psi, datum) -> None:
    hess = _psi_hessian(model, theta, psi, datum)
    try:
        numkit._chol_with_jitter(-hess)
    except NotPositiveDefinite as exc:
        raise SaddleDetected(
            "stationary point of the inner problem is not a local maximum"
        ) from exc


def profile_psi(
    model: VariationalModel,
    theta,
    datum,
    config: FitConfig,
    warm_start=None,
) -> np.ndarray:
    """Maximize ``psi -> v(theta, psi; datum)``; returns the inner optimum.

    Uses the model's closed form when available, otherwise safeguarded
    Newton ascent with backtracking line search. The result satisfies
    ``|grad_psi v|_inf <= config.inner_tol`` with a negative definite
    (within jitter) Hessian.
    """
    theta = as_vec(theta, dim=model.dim_theta)
    if model.psi_closed_form is not None:
        return as_vec(model.psi_closed_form(theta, datum), dim=model.dim_psi)
    psi0 = (
        as_vec(warm_start, dim=model.dim_psi)
        if warm_start is not None
        else as_vec(model.psi_init(datum), dim=model.dim_psi)
    )
    if model.profile_psi_fast is not None:
        return model.profile_psi_fast(
            theta, datum, psi0, config.inner_tol, config.max_inner_iter
        )

    psi = psi0.copy()
    value = float(model.v(theta, psi, datum))
    grad = np.asarray(model.grad_psi_v(theta, psi, datum), dtype=float)
    for _ in range(config.max_inner_iter):
        if np.max(np.abs(grad)) <= config.inner_tol:
            _check_inner_maximum(model, theta, psi, datum)
            return psi
        hess = _psi_hessian(model, theta, psi, datum)
        try:
            factor, _ = numkit._chol_with_jitter(-hess)
            direction = scipy.linalg.cho_solve(factor, grad)
        except NotPositiveDefinite:
            direction = grad / (1.0 + float(np.linalg.norm(grad)))
        slope = float(grad @ direction)
        if slope <= 0.0:
            direction = grad
            slope = float(grad @ grad)
        alpha = 1.0
        accepted = False
        # round-off slack keeps sub-ulp Newton steps acceptable near the optimum
        slack = 1e-14 * (1.0 + abs(value))
        for _ in range(60):
            cand = psi + alpha * direction
            v_cand = float(model.v(theta, cand, datum))
            if math.isfinite(v_cand) and v_cand >= value + 1e-4 * alpha * slope - slack:
                psi = cand
                value = v_cand
                grad = np.asarray(model.grad_psi_v(theta, psi, datum), dtype=float)
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            raise InnerDivergence("inner line search stalled before tolerance")
    raise InnerDivergence(
        f"inner optimization exceeded {config.max_inner_iter} iterations"
    )


def profiled_criterion(model, theta, datum, config: FitConfig) -> float:
    """Per-datum profiled criterion ``m(theta; datum) = sup_psi v``."""
    psi = profile_psi(model, theta, datum, config)
    return float(model.v(as_vec(theta, dim=model.dim_theta), psi, datum))


# ---------------------------------------------------------------------------
# outer stage
# ---------------------------------------------------------------------------

class _ProfiledObjective:
    """Averaged profiled criterion with warm-started inner solves.

    Values and envelope gradients are cached per ``theta`` so the optimizer
    callback and convergence checks reuse work.
    """

    def __init__(self, model, data, config, warm):
        self.model = model
        self.data = data
        self.config = config
        self.warm = warm  # (n, dim_psi) or None for closed-form models
        self._cache = {}

    def value_grad(self, theta: np.ndarray):
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        model = self.model
        if model.batch_value_grad is not None:
            value, grad, psi_mat = model.batch_value_grad(
                theta, self.data, self.warm, self.config
            )
            self.warm = psi_mat
        else:
            n = self.data.n
            total = 0.0
            grad = np.zeros(model.dim_theta)
            psi_mat = np.empty((n, model.dim_psi))
            for i, datum in enumerate(self.data):
                warm_i = self.warm[i] if self.warm is not None else None
                try:
                    psi = profile_psi(model, theta, datum, self.config, warm_start=warm_i)
                except (InnerDivergence, SaddleDetected) as exc:
                    exc.datum_index = i
                    raise
                psi_mat[i] = psi
                total += float(model.v(theta, psi, datum))
                grad += np.asarray(model.grad_theta_v(theta, psi, datum), dtype=float)
            value = total / n
            grad = grad / n
            self.warm = psi_mat
        result = (value, grad, self.warm)
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = result
        return result


def _initial_warm(model, data, rng_gen, jitter_sd, jitter: bool):
    if model.psi_closed_form is not None:
        return None
    warm = np.empty((data.n, model.dim_psi))
    for i, datum in enumerate(data):
        warm[i] = as_vec(model.psi_init(datum), dim=model.dim_psi)
    if jitter:
        warm = warm + jitter_sd * rng_gen.standard_normal(warm.shape)
    return warm


def _run_quasinewton(model, data, config, theta0, warm):
    objective = _ProfiledObjective(model, data, config, warm)
    trace = []

    def neg_value(x):
        value, _, _ = objective.value_grad(np.asarray(x, dtype=float))
        return -value

    def neg_grad(x):
        _, grad, _ = objective.value_grad(np.asarray(x, dtype=float))
        return -grad

    def on_iterate(xk):
        value, grad, _ = objective.value_grad(np.asarray(xk, dtype=float))
        trace.append((len(trace) + 1, value, float(np.max(np.abs(grad)))))

    value0, grad0, _ = objective.value_grad(theta0)
    trace.append((0, value0, float(np.max(np.abs(grad0)))))
    theta = theta0
    # restarting from a stall resets the BFGS curvature model, which
    # recovers most line-search precision losses near the optimum
    for _ in range(3):
        opt = scipy.optimize.minimize(
            neg_value,
            theta,
            jac=neg_grad,
            method="BFGS",
            callback=on_iterate,
            options={"gtol": config.outer_tol, "maxiter": config.max_outer_iter},
        )
        theta = np.asarray(opt.x, dtype=float)
        _, grad, _ = objective.value_grad(theta)
        if np.max(np.abs(grad)) <= config.outer_tol:
            break
    value, grad, psi_mat = objective.value_grad(theta)
    converged = bool(np.max(np.abs(grad)) <= config.outer_tol)
    return theta, value, psi_mat, converged, trace


def _run_alternating(model, data, config, theta0, warm):
    """Cyclic scheme: profile every psi at fixed theta, then maximize the
    criterion over theta at fixed psi. Monotone in the joint criterion.

    Alternation converges linearly, so once the sweep increments stall the
    run is finished by quasi-Newton ascent from the alternation fixed point
    (line-searched ascent keeps the criterion trace non-decreasing).
    """
    objective = _ProfiledObjective(model, data, config, warm)
    theta = theta0.copy()
    trace = []
    last_value = -np.inf
    for sweep in range(1, config.max_outer_iter + 1):
        value, grad, psi_mat = objective.value_grad(theta)
        trace.append((sweep, value, float(np.max(np.abs(grad)))))
        if np.max(np.abs(grad)) <= config.outer_tol:
            return theta, value, psi_mat, True, trace
        if value <= last_value + 1e-12 * max(1.0, abs(value)):
            break
        last_value = value
        fixed_psi = psi_mat.copy() if psi_mat is not None else None

        def neg_fixed(x):
            x = np.asarray(x, dtype=float)
            total = 0.0
            for i, datum in enumerate(data):
                psi_i = (
                    fixed_psi[i]
                    if fixed_psi is not None
                    else profile_psi(model, x, datum, config)
                )
                total += float(model.v(x, psi_i, datum))
            return -total / data.n

        def neg_fixed_grad(x):
            x = np.asarray(x, dtype=float)
            grad_sum = np.zeros(model.dim_theta)
            for i, datum in enumerate(data):
                psi_i = (
                    fixed_psi[i]
                    if fixed_psi is not None
                    else profile_psi(model, x, datum, config)
                )
                grad_sum += np.asarray(model.grad_theta_v(x, psi_i, datum), dtype=float)
            return -grad_sum / data.n

        opt = scipy.optimize.minimize(
            neg_fixed,
            theta,
            jac=neg_fixed_grad,
            method="BFGS",
            options={"gtol": config.outer_tol * 0.1, "maxiter": 50},
        )
        candidate = np.asarray(opt.x, dtype=float)
        cand_value, _, _ = objective.value_grad(candidate)
        if cand_value >= value:
            theta = candidate

    theta, value, psi_mat, converged, polish_trace = _run_quasinewton(
        model, data, config, theta, objective.warm
    )
    offset = len(trace)
    trace.extend((offset + i, v, g) for i, v, g in polish_trace)
    return theta, value, psi_mat, converged, trace


def fit_variational(model: VariationalModel, data: Dataset, config: FitConfig) -> FitResult:
    """Two-stage variational estimate with multistart.

    Runs ``config.multistart_count`` outer optimizations from jittered
    starts and returns the converged run with the highest criterion (ties
    within 1e-10 break toward the lowest start index).
    """
    if data.n < model.dim_theta:
        raise ValueError(
            f"need at least dim_theta={model.dim_theta} datums, got {data.n}"
        )
    theta_base = as_vec(model.theta_init(data), dim=model.dim_theta)
    candidates = []
    failures = []
    for start in range(config.multistart_count):
        gen = config.rng.child(start).generator()
        if start == 0:
            theta0 = theta_base.copy()
            warm = _initial_warm(model, data, gen, config.start_jitter_sd, jitter=False)
        else:
            theta0 = theta_base + config.start_jitter_sd * gen.standard_normal(
                model.dim_theta
            )
            warm = _initial_warm(model, data, gen, config.start_jitter_sd, jitter=True)
        runner = _run_quasinewton if config.mode == "quasinewton" else _run_alternating
        try:
            theta, value, psi_mat, converged, trace = runner(
                model, data, config, theta0, warm
            )
        except VicalibError as exc:
            failures.append((start, exc))
            continue
        if converged:
            candidates.append((start, theta, value, psi_mat, trace))
        else:
            failures.append((start, NoConvergedStart(f"start {start} did not converge")))
    if not candidates:
        detail = "; ".join(f"start {s}: {e}" for s, e in failures)
        raise NoConvergedStart(f"all {config.multistart_count} starts failed ({detail})")

    best = None
    best_value = -np.inf
    for start, theta, value, psi_mat, trace in candidates:
        if value > best_value + 1e-10:
            best = (start, theta, value, psi_mat, trace)
            best_value = value
    start, theta, value, psi_mat, trace = best

    if psi_mat is None:  # closed-form models: materialize the profiled psi
        psi_mat = np.empty((data.n, model.dim_psi))
        for i, datum in enumerate(data):
            psi_mat[i] = profile_psi(model, theta, datum, config)
    criterion = 0.0
    for i, datum in enumerate(data):
        criterion += float(model.v(theta, psi_mat[i], datum))
    criterion /= data.n
    return FitResult(
        theta_hat=theta,
        psi_hat=psi_mat,
        criterion_value=criterion,
        converged=True,
        trace=tuple(trace),
        config_echo=config,
        start_index=start,
    )
