"""Exponential-rate mixture with a log-normal variational family.

Data are positive pairs ``(x1, x2)`` generated as ``X1 ~ Exp(lam1)``,
``Z ~ Exp(lam2)`` latent, ``X2 | Z ~ Exp(lam1 * Z)``; marginally ``X2`` is
Lomax with scale ``lam2 / lam1`` and shape 1. The structural parameter is
``theta = (log lam1, log lam2)`` and the variational family over ``Z`` is
log-normal with ``psi = (mu, log sigma)``.

With ``T = lam1 * x2 + lam2`` and ``E = exp(mu + sigma^2 / 2)`` the
criterion term is

    v = 2 log lam1 + log lam2 - lam1 * x1 + 2 mu - T * E + log sigma + 1/2

(additive constants dropped), whose inner maximum has the closed form
``sigma = 1 / sqrt(2)``, ``mu = log(2 / T) - 1/4``. The marginal
log-likelihood is available exactly:

    loglik = 2 log lam1 + log lam2 - lam1 * x1 - 2 log T

so the profiled criterion equals the marginal log-likelihood up to a
constant, which the tests verify numerically. A misspecified generator
(``X1 ~ Gamma(3, rate 3 lam1)``, same mean) is available for robustness
studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numkit import RngStream, as_vec
from ..vcore import Dataset, VariationalModel

_LOG2 = math.log(2.0)
_SIGMA_HAT = 1.0 / math.sqrt(2.0)
_LOG_SIGMA_HAT = -0.5 * _LOG2


@dataclass(frozen=True)
class ExpMixDatum:
    x1: float
    x2: float

    def __post_init__(self):
        if not (math.isfinite(self.x1) and self.x1 > 0):
            raise ValueError(f"x1 must be positive and finite, got {self.x1!r}")
        if not (math.isfinite(self.x2) and self.x2 > 0):
            raise ValueError(f"x2 must be positive and finite, got {self.x2!r}")


def dataset_from_arrays(x1, x2, source: str = "arrays") -> Dataset:
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.ndim != 1:
        raise ValueError("x1 and x2 must be 1-d arrays of equal length")
    return Dataset(
        data=tuple(ExpMixDatum(float(a), float(b)) for a, b in zip(x1, x2)),
        source=source,
    )


class ExpMixModel(VariationalModel):
    """Two-rate exponential mixture; see the module docstring for forms."""

    dim_theta = 2
    dim_psi = 2

    def __init__(self, misspecified: bool = False):
        self.misspecified = misspecified
        self._cache_key = None
        self._cache_arrays = None

    # --- criterion and derivatives -------------------------------------

    def v(self, theta, psi, datum) -> float:
        t0, t1 = float(theta[0]), float(theta[1])
        mu, log_sigma = float(psi[0]), float(psi[1])
        lam1, lam2 = math.exp(t0), math.exp(t1)
        sig2 = math.exp(2.0 * log_sigma)
        big_t = lam1 * datum.x2 + lam2
        big_e = math.exp(mu + 0.5 * sig2)
        return (
            2.0 * t0 + t1 - lam1 * datum.x1 + 2.0 * mu - big_t * big_e
            + log_sigma + 0.5
        )

    def grad_theta_v(self, theta, psi, datum) -> np.ndarray:
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        sig2 = math.exp(2.0 * psi[1])
        big_e = math.exp(psi[0] + 0.5 * sig2)
        return np.array(
            [2.0 - lam1 * datum.x1 - lam1 * datum.x2 * big_e, 1.0 - lam2 * big_e]
        )

    def grad_psi_v(self, theta, psi, datum) -> np.ndarray:
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        sig2 = math.exp(2.0 * psi[1])
        big_t = lam1 * datum.x2 + lam2
        big_e = math.exp(psi[0] + 0.5 * sig2)
        return np.array([2.0 - big_t * big_e, 1.0 - big_t * sig2 * big_e])

    def hess_psi_v(self, theta, psi, datum) -> np.ndarray:
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        sig2 = math.exp(2.0 * psi[1])
        big_t = lam1 * datum.x2 + lam2
        big_e = math.exp(psi[0] + 0.5 * sig2)
        te = big_t * big_e
        return np.array(
            [
                [-te, -te * sig2],
                [-te * sig2, -te * (2.0 * sig2 + sig2 * sig2)],
            ]
        )

    def psi_closed_form(self, theta, datum) -> np.ndarray:
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        big_t = lam1 * datum.x2 + lam2
        return np.array([_LOG2 - math.log(big_t) - 0.25, _LOG_SIGMA_HAT])

    def psi_init(self, datum) -> np.ndarray:
        return np.array([0.0, _LOG_SIGMA_HAT])

    def deriv_blocks(self, theta, psi, datum):
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        sig2 = math.exp(2.0 * psi[1])
        big_e = math.exp(psi[0] + 0.5 * sig2)
        a1 = lam1 * datum.x2 * big_e  # d(-T E)/d log lam1
        a2 = lam2 * big_e
        tt = np.array([[-lam1 * datum.x1 - a1, 0.0], [0.0, -a2]])
        tp = np.array([[-a1, -a1 * sig2], [-a2, -a2 * sig2]])
        pp = self.hess_psi_v(theta, psi, datum)
        return tt, tp, pp

    # --- marginal likelihood --------------------------------------------

    def marginal_loglik(self, theta, datum) -> float:
        t0, t1 = float(theta[0]), float(theta[1])
        lam1, lam2 = math.exp(t0), math.exp(t1)
        return (
            2.0 * t0 + t1 - lam1 * datum.x1
            - 2.0 * math.log(lam1 * datum.x2 + lam2)
        )

    def marginal_score(self, theta, datum) -> np.ndarray:
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        big_t = lam1 * datum.x2 + lam2
        return np.array(
            [
                2.0 - lam1 * datum.x1 - 2.0 * lam1 * datum.x2 / big_t,
                1.0 - 2.0 * lam2 / big_t,
            ]
        )

    # --- simulation -------------------------------------------------------

    def simulate(self, theta, template_datum, rng: RngStream) -> ExpMixDatum:
        gen = rng.generator()
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        if self.misspecified:
            x1 = gen.gamma(3.0, 1.0 / (3.0 * lam1))
        else:
            x1 = gen.exponential(1.0 / lam1)
        z = gen.exponential(1.0 / lam2)
        x2 = gen.exponential(1.0 / (lam1 * z))
        return ExpMixDatum(float(x1), float(x2))

    def simulate_dataset(self, theta, n: int, rng: RngStream, source="simulated") -> Dataset:
        """Vectorized n-datum draw; same conditional structure as
        :meth:`simulate`, drawn as three blocks (x1, z, x2)."""
        gen = rng.generator()
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        if self.misspecified:
            x1 = gen.gamma(3.0, 1.0 / (3.0 * lam1), size=n)
        else:
            x1 = gen.exponential(1.0 / lam1, size=n)
        z = gen.exponential(1.0 / lam2, size=n)
        x2 = gen.exponential(1.0 / (lam1 * z))
        return dataset_from_arrays(x1, x2, source=source)

    # --- engine hooks --------------------------------------------------------

    def theta_init(self, data: Dataset) -> np.ndarray:
        x1, x2 = self.arrays(data)
        lam1 = 1.0 / float(np.mean(x1))
        lam2 = lam1 * max(float(np.median(x2)), 1e-8)
        return np.array([math.log(lam1), math.log(lam2)])

    def arrays(self, data: Dataset):
        """Column arrays for a dataset, cached for repeated engine calls."""
        key = id(data)
        if self._cache_key != key:
            x1 = np.array([d.x1 for d in data])
            x2 = np.array([d.x2 for d in data])
            self._cache_key = key
            self._cache_arrays = (x1, x2)
        return self._cache_arrays

    def batch_value_grad(self, theta, data: Dataset, warm, config):
        theta = as_vec(theta, dim=2)
        x1, x2 = self.arrays(data)
        lam1, lam2 = math.exp(theta[0]), math.exp(theta[1])
        big_t = lam1 * x2 + lam2
        mu = _LOG2 - np.log(big_t) - 0.25
        # at the inner optimum T * E = 2 exactly
        value = float(
            np.mean(
                2.0 * theta[0] + theta[1] - lam1 * x1 + 2.0 * mu - 2.0
                + _LOG_SIGMA_HAT + 0.5
            )
        )
        g0 = float(np.mean(2.0 - lam1 * x1 - 2.0 * lam1 * x2 / big_t))
        g1 = float(np.mean(1.0 - 2.0 * lam2 / big_t))
        psi_mat = np.column_stack([mu, np.full(mu.shape, _LOG_SIGMA_HAT)])
        return value, np.array([g0, g1]), psi_mat
