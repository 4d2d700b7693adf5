"""Shared stub models and helpers for the test suite."""

from __future__ import annotations

import math

import numpy as np
import pytest

from vicalib.numkit import RngStream
from vicalib.vcore import Dataset, FitConfig, VariationalModel


class QuadraticStub(VariationalModel):
    """Separable quadratic criterion: v = -(x - theta)^2/2 - (psi - theta)^2/2.

    The inner optimum is psi = theta, the profiled criterion is
    -(x - theta)^2 / 2, and the marginal log-likelihood of x ~ N(theta, 1)
    equals the profiled criterion up to a constant.
    """

    dim_theta = 1
    dim_psi = 1

    def v(self, theta, psi, datum):
        return -0.5 * (datum - theta[0]) ** 2 - 0.5 * (psi[0] - theta[0]) ** 2

    def grad_theta_v(self, theta, psi, datum):
        return np.array([(datum - theta[0]) + (psi[0] - theta[0])])

    def grad_psi_v(self, theta, psi, datum):
        return np.array([-(psi[0] - theta[0])])

    def hess_psi_v(self, theta, psi, datum):
        return np.array([[-1.0]])

    def deriv_blocks(self, theta, psi, datum):
        return np.array([[-2.0]]), np.array([[1.0]]), np.array([[-1.0]])

    def psi_closed_form(self, theta, datum):
        return np.array([theta[0]])

    def psi_init(self, datum):
        return np.zeros(1)

    def theta_init(self, data):
        return np.array([float(np.mean([d for d in data]))])

    def simulate(self, theta, template_datum, rng: RngStream):
        return float(theta[0] + rng.generator().standard_normal())

    def marginal_loglik(self, theta, datum):
        return -0.5 * (datum - theta[0]) ** 2 - 0.5 * math.log(2.0 * math.pi)

    def marginal_score(self, theta, datum):
        return np.array([datum - theta[0]])


class ShiftedSimStub(QuadraticStub):
    """Same criterion but simulation is shifted: the mean criterion gradient
    at theta_star is the shift, so the consistency check must reject."""

    def __init__(self, shift: float):
        self.shift = shift

    def simulate(self, theta, template_datum, rng: RngStream):
        return float(theta[0] + self.shift + rng.generator().standard_normal())


class ZeroCouplingStub(VariationalModel):
    """No theta-psi coupling: v = -(x - theta)^2/2 - psi^2/2."""

    dim_theta = 1
    dim_psi = 1

    def v(self, theta, psi, datum):
        return -0.5 * (datum - theta[0]) ** 2 - 0.5 * psi[0] ** 2

    def grad_theta_v(self, theta, psi, datum):
        return np.array([datum - theta[0]])

    def grad_psi_v(self, theta, psi, datum):
        return np.array([-psi[0]])

    def hess_psi_v(self, theta, psi, datum):
        return np.array([[-1.0]])

    def psi_closed_form(self, theta, datum):
        return np.zeros(1)

    def psi_init(self, datum):
        return np.zeros(1)

    def simulate(self, theta, template_datum, rng):
        return float(theta[0] + rng.generator().standard_normal())


def gaussian_dataset(theta: float, n: int, seed: int) -> Dataset:
    gen = RngStream(seed).generator()
    return Dataset(data=tuple(theta + gen.standard_normal(n)))


@pytest.fixture
def quad_model():
    return QuadraticStub()


@pytest.fixture
def fast_config():
    return FitConfig(multistart_count=1, rng=RngStream(5))
