import math

import numpy as np
import pytest

from vicalib.errors import InnerHessianSingular, NegativeVariance, VHatSingular
from vicalib.models import ExpMixModel
from vicalib.numkit import RngStream, hess_fd
from vicalib.sandwich import (
    SandwichEstimate,
    a_hat,
    b_hat,
    criterion_blocks,
    sandwich_cov,
    wald_intervals,
    wald_joint_test,
)
from vicalib.vcore import Dataset, FitConfig, FitResult, VariationalModel, profiled_criterion

from conftest import QuadraticStub, ZeroCouplingStub, gaussian_dataset


def _fake_fit(model, theta, data, config=FitConfig()) -> FitResult:
    from vicalib.vcore import profile_psi

    theta = np.asarray(theta, dtype=float)
    psi = np.vstack([profile_psi(model, theta, d, config) for d in data])
    value = sum(model.v(theta, psi[i], d) for i, d in enumerate(data)) / data.n
    return FitResult(
        theta_hat=theta,
        psi_hat=psi,
        criterion_value=value,
        converged=True,
        trace=tuple(),
        config_echo=config,
    )


# --- curvature matrix -------------------------------------------------------------

def test_a_hat_quadratic_stub_exact():
    model = QuadraticStub()
    data = Dataset(data=(0.4, -1.2, 2.0))
    fit = _fake_fit(model, [0.1], data)
    # per datum: -2 - (1)(-1)^{-1}(1) = -1 for any data
    np.testing.assert_allclose(a_hat(model, fit, data), [[-1.0]], atol=1e-8)


def test_a_hat_zero_coupling_stub():
    model = ZeroCouplingStub()
    data = Dataset(data=(1.0, 2.0, 3.0))
    fit = _fake_fit(model, [0.5], data)
    np.testing.assert_allclose(a_hat(model, fit, data), [[-1.0]], atol=1e-8)


def test_blocks_fd_fallback_matches_analytic():
    """A model exposing only v goes through the stacked-Hessian fallback."""

    class BareQuadratic(QuadraticStub):
        grad_theta_v = VariationalModel.grad_theta_v
        grad_psi_v = VariationalModel.grad_psi_v
        hess_psi_v = None
        deriv_blocks = None

    model = BareQuadratic()
    tt, tp, pp = criterion_blocks(model, np.array([0.2]), np.array([0.2]), 1.3)
    np.testing.assert_allclose(tt, [[-2.0]], atol=1e-4)
    np.testing.assert_allclose(tp, [[1.0]], atol=1e-4)
    np.testing.assert_allclose(pp, [[-1.0]], atol=1e-4)


def test_blocks_gradient_jacobian_path():
    """Analytic gradients without deriv_blocks use the Jacobian route."""

    class GradOnly(QuadraticStub):
        deriv_blocks = None
        hess_psi_v = None

    model = GradOnly()
    tt, tp, pp = criterion_blocks(model, np.array([0.2]), np.array([0.2]), 1.3)
    np.testing.assert_allclose(tt, [[-2.0]], atol=1e-8)
    np.testing.assert_allclose(tp, [[1.0]], atol=1e-8)
    np.testing.assert_allclose(pp, [[-1.0]], atol=1e-8)


def test_a_hat_inner_hessian_singular():
    class BadInner(QuadraticStub):
        def deriv_blocks(self, theta, psi, datum):
            return np.array([[-2.0]]), np.array([[1.0]]), np.array([[1.0]])

    model = BadInner()
    data = Dataset(data=(1.0, 2.0))
    fit = _fake_fit(model, [0.0], data)
    with pytest.raises(InnerHessianSingular) as err:
        a_hat(model, fit, data)
    assert err.value.datum_index == 0


def test_a_hat_tolerant_mode_drops_within_budget():
    class MostlyGood(QuadraticStub):
        def deriv_blocks(self, theta, psi, datum):
            if datum > 500.0:
                return np.array([[-2.0]]), np.array([[1.0]]), np.array([[1.0]])
            return np.array([[-2.0]]), np.array([[1.0]]), np.array([[-1.0]])

    model = MostlyGood()
    data = Dataset(data=tuple(np.arange(200.0)) + (1000.0,))
    fit = _fake_fit(model, [0.0], data)
    result = a_hat(model, fit, data, tolerate_failures=True)
    np.testing.assert_allclose(result, [[-1.0]], atol=1e-8)
    with pytest.raises(InnerHessianSingular):
        a_hat(model, fit, data, tolerate_failures=False)


# --- gradient outer products ----------------------------------------------------------

def test_b_hat_quadratic_stub():
    model = QuadraticStub()
    data = Dataset(data=(1.0, -1.0))
    fit = _fake_fit(model, [0.0], data)
    np.testing.assert_allclose(b_hat(model, fit, data), [[1.0]], atol=1e-12)


def test_b_hat_single_datum_at_optimum_is_zero():
    model = QuadraticStub()
    data = Dataset(data=(0.7,))
    fit = _fake_fit(model, [0.7], data)
    np.testing.assert_allclose(b_hat(model, fit, data), [[0.0]], atol=1e-12)


def test_b_hat_matches_marginal_score_outer_product():
    model = ExpMixModel()
    data = model.simulate_dataset([0.0, 0.0], 5000, RngStream(100))
    theta = np.array([0.05, -0.02])
    fit = _fake_fit(model, theta, data)
    envelope = b_hat(model, fit, data)
    outer = np.zeros((2, 2))
    for d in data:
        s = model.marginal_score(theta, d)
        outer += np.outer(s, s)
    np.testing.assert_allclose(envelope, outer / data.n, atol=1e-6)


def test_b_hat_always_psd():
    gen = RngStream(55).generator()
    model = ExpMixModel()
    for _ in range(10):
        data = model.simulate_dataset(gen.normal(scale=0.4, size=2), 60, RngStream(int(gen.integers(1e6))))
        fit = _fake_fit(model, gen.normal(scale=0.4, size=2), data)
        eigs = np.linalg.eigvalsh(b_hat(model, fit, data))
        assert np.all(eigs >= -1e-12)


# --- sandwich ------------------------------------------------------------------------

def test_sandwich_quadratic_stub_unit_variance():
    model = QuadraticStub()
    data = Dataset(data=(1.0, -1.0))
    fit = _fake_fit(model, [0.0], data)
    est = sandwich_cov(model, fit, data)
    np.testing.assert_allclose(est.v_hat, [[1.0]], atol=1e-10)
    np.testing.assert_allclose(est.v_hat, est.a_hat @ est.b_hat @ est.a_hat, atol=1e-8)


def test_sandwich_gaussian_location_near_unit():
    model = QuadraticStub()
    data = gaussian_dataset(0.0, 500, seed=9)
    fit = _fake_fit(model, [float(np.mean(data.data))], data)
    est = sandwich_cov(model, fit, data)
    assert abs(est.v_hat[0, 0] - 1.0) <= 0.25  # 4 standard errors of mean(x^2)


def test_sandwich_bartlett_sign_on_mixture():
    """With a criterion equal to the log-likelihood plus a constant, the
    curvature matrix is the negative of the gradient outer-product matrix."""
    model = ExpMixModel()
    data = model.simulate_dataset([0.0, 0.0], 5000, RngStream(8))
    from vicalib.vcore import fit_variational

    fit = fit_variational(model, data, FitConfig(multistart_count=1, rng=RngStream(1)))
    est = sandwich_cov(model, fit, data)
    scale = np.max(np.abs(est.b_hat))
    assert np.max(np.abs(est.a_hat + est.b_hat)) <= 0.10 * scale
    # and consequently V is close to B^{-1}
    b_inv = np.linalg.inv(est.b_hat)
    assert np.max(np.abs(est.v_hat - b_inv)) <= 0.25 * np.max(np.abs(b_inv))


def test_a_hat_route_equivalence_with_reprofiled_hessian():
    """The block formula and the finite-difference Hessian of the profiled
    criterion are two routes to the same matrix."""
    model = ExpMixModel()
    config = FitConfig()
    gen = RngStream(202).generator()
    from vicalib.models import ExpMixDatum

    for _ in range(10):
        theta = gen.normal(scale=0.4, size=2)
        datum = ExpMixDatum(float(gen.exponential()) + 0.1, float(gen.exponential()) + 0.1)
        from vicalib.vcore import profile_psi

        psi = profile_psi(model, theta, datum, config)
        tt, tp, pp = criterion_blocks(model, theta, psi, datum)
        block = tt - tp @ np.linalg.solve(pp, tp.T)
        fd = hess_fd(lambda t: profiled_criterion(model, t, datum, config), theta)
        np.testing.assert_allclose(block, fd, atol=1e-4)


# --- intervals and tests --------------------------------------------------------------

def _est(theta, v, n):
    v = np.atleast_2d(np.asarray(v, dtype=float))
    d = v.shape[0]
    return SandwichEstimate(
        a_hat=-np.eye(d), b_hat=np.eye(d), v_hat=v, n=n, theta_at=np.asarray(theta, float)
    )


def test_wald_interval_arithmetic():
    (lo, hi), = wald_intervals(_est([0.0], [[1.0]], 100), 0.95)
    assert abs(lo + 0.1959964) < 1e-6
    assert abs(hi - 0.1959964) < 1e-6


def test_wald_interval_midpoint_exact():
    est = _est([0.37, -1.2], [[2.0, 0.3], [0.3, 1.0]], 50)
    for (lo, hi), center in zip(wald_intervals(est, 0.5), est.theta_at):
        assert abs(0.5 * (lo + hi) - center) < 1e-15


def test_wald_interval_negative_variance():
    with pytest.raises(NegativeVariance):
        wald_intervals(_est([0.0, 0.0], [[-1.0, 0.0], [0.0, 1.0]], 10), 0.95)


def test_wald_joint_test_at_null():
    stat, reject = wald_joint_test(_est([0.3], [[1.0]], 25), [0.3], 0.95)
    assert stat == 0.0 and not reject


def test_wald_joint_test_known_statistic():
    # (theta - theta0)^2 / (v/n) = 0.2^2 / 0.01 = 4.0 > 3.841
    est = _est([0.2], [[1.0]], 100)
    stat, reject = wald_joint_test(est, [0.0], 0.95)
    assert abs(stat - 4.0) < 1e-12
    assert reject
    # chi-square(1) 95% cutoff oracle: square of the normal quantile
    from vicalib.numkit import quantile

    cutoff = quantile("normal", 0.975) ** 2
    assert abs(quantile("chi2", 0.95, 1.0) - cutoff) < 1e-7


def test_wald_joint_test_singular():
    est = SandwichEstimate(
        a_hat=-np.eye(2),
        b_hat=np.zeros((2, 2)),
        v_hat=np.zeros((2, 2)),
        n=10,
        theta_at=np.zeros(2),
    )
    with pytest.raises(VHatSingular):
        wald_joint_test(est, [1.0, 1.0], 0.95)


def test_sandwich_estimate_rejects_indefinite_b():
    with pytest.raises(ValueError):
        SandwichEstimate(
            a_hat=-np.eye(2),
            b_hat=np.array([[1.0, 0.0], [0.0, -1.0]]),
            v_hat=np.eye(2),
            n=10,
            theta_at=np.zeros(2),
        )
