import math

import numpy as np
import pytest

from vicalib.errors import ModeSearchFailed, NonFiniteEvaluation, OrderOutOfRange
from vicalib.quadrature import SQRT_PI, adaptive_marginal, gauss_expect, gh_rule

# frozen Monte Carlo oracle: E[log(1 + e^Z)] for Z ~ N(0,1), computed from
# 1e7 standard normal draws (5e6 antithetic pairs), PCG64 seed 20260808
SOFTPLUS_MC_ORACLE = 0.806100339674079


def _softplus(z):
    return float(np.logaddexp(0.0, z))


# --- nodes and weights ------------------------------------------------------

def test_rule_order_one():
    rule = gh_rule(1)
    np.testing.assert_allclose(rule.nodes, [0.0], atol=0)
    np.testing.assert_allclose(rule.weights, [SQRT_PI], rtol=1e-15)


def test_rule_order_two_analytic_roots():
    rule = gh_rule(2)
    np.testing.assert_allclose(
        sorted(rule.nodes), [-1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)], atol=1e-14
    )
    np.testing.assert_allclose(rule.weights, [SQRT_PI / 2.0] * 2, rtol=1e-14)


@pytest.mark.parametrize("order", [1, 2, 5, 20, 64, 100])
def test_rule_invariants(order):
    rule = gh_rule(order)
    assert rule.order == order
    np.testing.assert_allclose(rule.nodes, -rule.nodes[::-1], atol=0)
    assert np.all(rule.weights > 0)
    assert abs(rule.weights.sum() - SQRT_PI) < 1e-12


def test_rule_order_out_of_range():
    for order in (0, -3, 101):
        with pytest.raises(OrderOutOfRange):
            gh_rule(order)


def _gaussian_moment(j: int) -> float:
    """integral of t^j exp(-t^2) dt: 0 for odd j, Gamma((j+1)/2) for even."""
    if j % 2 == 1:
        return 0.0
    return math.gamma((j + 1) / 2.0)


@pytest.mark.parametrize("order", [3, 8, 20])
def test_rule_polynomial_exactness_degree(order):
    rule = gh_rule(order)
    for j in range(2 * order):
        approx = float(rule.weights @ rule.nodes**j)
        exact = _gaussian_moment(j)
        # odd moments cancel to zero, so scale by the summed term magnitude
        scale = max(1.0, float(rule.weights @ np.abs(rule.nodes) ** j))
        assert abs(approx - exact) <= 1e-10 * scale
    # degree 2k is the first inexact one
    j = 2 * order
    approx = float(rule.weights @ rule.nodes**j)
    exact = _gaussian_moment(j)
    assert abs(approx - exact) > 1e-10 * abs(exact)


def test_rule_fourth_moment_closed_form():
    rule = gh_rule(20)
    value = float(rule.weights @ rule.nodes**4)
    assert abs(value - 3.0 * SQRT_PI / 4.0) < 1e-12


# --- Gaussian expectations ---------------------------------------------------

def test_gauss_expect_linear_exact():
    rule = gh_rule(7)
    for mean, sd in [(0.0, 1.0), (-2.5, 0.3), (4.0, 7.0)]:
        assert abs(gauss_expect(rule, lambda z: z, mean, sd) - mean) < 1e-12 * max(
            1.0, abs(mean)
        )


def test_gauss_expect_second_moment_exact():
    rule = gh_rule(2)
    assert abs(gauss_expect(rule, lambda z: z * z, 0.0, 1.0) - 1.0) < 1e-14


def test_gauss_expect_softplus_matches_mc_oracle():
    rule = gh_rule(20)
    value = gauss_expect(rule, _softplus, 0.0, 1.0)
    assert abs(value - SOFTPLUS_MC_ORACLE) < 1e-4


def test_gauss_expect_affine_invariance():
    rule = gh_rule(24)
    a, b = 0.3, 1.7
    mean, sd = -0.4, 0.9
    lhs = gauss_expect(rule, lambda z: _softplus(a + b * z), mean, sd)
    rhs = gauss_expect(rule, _softplus, a + b * mean, abs(b) * sd)
    assert abs(lhs - rhs) < 1e-12


def test_gauss_expect_validation():
    rule = gh_rule(5)
    with pytest.raises(ValueError):
        gauss_expect(rule, _softplus, 0.0, 0.0)
    with pytest.raises(NonFiniteEvaluation):
        gauss_expect(rule, lambda z: float("inf"), 0.0, 1.0)


# --- adaptive recentered marginals ------------------------------------------------

def _log_phi(z, mean=0.0, var=1.0):
    return -0.5 * math.log(2.0 * math.pi * var) - 0.5 * (z - mean) ** 2 / var


def test_adaptive_marginal_normalized_density():
    rule = gh_rule(30)
    assert abs(adaptive_marginal(lambda z: _log_phi(z), rule)) < 1e-10


def test_adaptive_marginal_gaussian_product_closed_form():
    # integral of phi(z) phi(z - 1) dz equals the N(0, 2) density at 1
    rule = gh_rule(30)
    value = adaptive_marginal(lambda z: _log_phi(z) + _log_phi(z, mean=1.0), rule)
    target = -0.25 - 0.5 * math.log(4.0 * math.pi)
    assert abs(value - target) < 1e-10


def _expmix_logjoint_u(u, lam1, lam2, x1, x2):
    """Joint of the exponential mixture with the positive latent mapped to
    the whole axis via z = exp(u); includes the Jacobian term."""
    z = math.exp(u)
    return (
        2.0 * math.log(lam1)
        + math.log(lam2)
        - lam1 * x1
        + math.log(z)
        - (lam1 * x2 + lam2) * z
        + u
    )


def test_adaptive_marginal_mixture_closed_form():
    rule = gh_rule(30)
    value = adaptive_marginal(lambda u: _expmix_logjoint_u(u, 1.0, 1.0, 1.0, 1.0), rule)
    assert abs(value - (-2.386294361119891)) < 1e-6


def test_adaptive_marginal_matches_trapezoid_oracle_on_grid():
    rule = gh_rule(30)
    u = np.linspace(-30.0, 10.0, 200_001)
    for lam1 in (0.5, 1.0, 2.0):
        for lam2 in (0.5, 1.0, 2.0):
            x1, x2 = 0.9, 1.4
            value = adaptive_marginal(
                lambda t: _expmix_logjoint_u(t, lam1, lam2, x1, x2), rule
            )
            z = np.exp(u)
            logj = (
                2.0 * math.log(lam1)
                + math.log(lam2)
                - lam1 * x1
                + np.log(z)
                - (lam1 * x2 + lam2) * z
                + u
            )
            oracle = math.log(np.trapezoid(np.exp(logj), u))
            assert abs(value - oracle) < 1e-6


def test_adaptive_marginal_mode_search_failures():
    rule = gh_rule(10)
    with pytest.raises(ModeSearchFailed):
        adaptive_marginal(lambda z: z, rule)  # no interior maximum
    with pytest.raises(ModeSearchFailed):
        adaptive_marginal(lambda z: 0.0, rule)  # flat, no ascent direction
