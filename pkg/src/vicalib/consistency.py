"""Simulation-based consistency assessment of the variational estimator.

At a candidate parameter ``theta_star`` the procedure simulates replicate
datums from the model, profiles the variational parameters for each, and
collects the envelope gradient of the criterion. If the estimator is
consistent at ``theta_star`` these gradients have mean zero; a rejected
mean-zero test is therefore evidence of inconsistency. Both componentwise
t tests and the joint Hotelling T-squared test are reported; the joint test
drives the verdict.

A non-rejection is a necessary but not a sufficient sign of consistency:
the mean gradient can vanish at a point that is not the criterion's global
maximizer, and nothing in the gradient magnitude measures how far the
estimator's limit sits from the truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularSampleCovariance, ZeroVariance
from .numkit import RngStream, as_vec, cdf, sf
from .vcore import Dataset, FitConfig, VariationalModel, profile_psi

CAVEAT = (
    "A pass means the mean criterion gradient is statistically "
    "indistinguishable from zero at theta_star; this is necessary but not "
    "sufficient for consistency, and says nothing about the size of any "
    "asymptotic bias."
)

VERDICT_NO_EVIDENCE = "no_evidence_of_inconsistency"
VERDICT_JOINT = "inconsistent_joint"
VERDICT_COMPONENTS = "inconsistent_components"


@dataclass(frozen=True)
class ConsistencyReport:
    theta_star: np.ndarray
    b: int
    alpha: float
    gradients: np.ndarray  # (b, d)
    column_means: np.ndarray
    marginal_t: tuple  # d pairs (statistic, p_value)
    hotelling: tuple  # (T2, F statistic, p_value)
    verdict: str
    components: tuple  # indices flagged when verdict is inconsistent_components
    caveat: str = CAVEAT


def consistency_gradients(
    model: VariationalModel,
    theta_star,
    template: Dataset,
    b: int,
    rng: RngStream,
    config: FitConfig,
) -> np.ndarray:
    """One envelope gradient per simulated replicate, as rows.

    Replicate ``j`` resamples a template datum (with replacement), simulates
    a fresh datum from the model at ``theta_star`` conditional on that
    template's structure, profiles psi, and evaluates the theta-gradient of
    the criterion there. Deterministic given ``rng``.
    """
    theta_star = as_vec(theta_star, dim=model.dim_theta)
    if b < model.dim_theta + 1:
        raise ValueError(
            f"need at least dim_theta + 1 = {model.dim_theta + 1} replicates, got {b}"
        )
    grads = np.empty((b, model.dim_theta))
    for j in range(b):
        stream = rng.child(j)
        pick = int(stream.child(0).generator().integers(0, template.n))
        datum = model.simulate(theta_star, template[pick], stream.child(1))
        psi = profile_psi(model, theta_star, datum, config)
        grads[j] = np.asarray(
            model.grad_theta_v(theta_star, psi, datum), dtype=float
        )
    return grads


def hotelling_t2(gradients) -> tuple[float, float, float]:
    """Hotelling test of zero mean: ``(T2, F statistic, p value)``.

    ``T2 = b * mean' S^{-1} mean`` with ``S`` the sample covariance;
    ``F = T2 (b - d) / (d (b - 1))`` follows an F(d, b - d) null law.
    """
    g = np.asarray(gradients, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    b, d = g.shape
    if b <= d:
        raise ValueError(f"need more replicates ({b}) than dimensions ({d})")
    mean = g.mean(axis=0)
    if np.all(mean == 0.0):
        return 0.0, 0.0, 1.0
    centered = g - mean
    cov = centered.T @ centered / (b - 1)
    try:
        solved = np.linalg.solve(cov, mean)
    except np.linalg.LinAlgError as exc:
        raise SingularSampleCovariance(str(exc)) from exc
    if not np.all(np.isfinite(solved)):
        raise SingularSampleCovariance("sample covariance numerically singular")
    t2 = float(b * mean @ solved)
    f_stat = t2 * (b - d) / (d * (b - 1))
    p = sf("f_dist", f_stat, float(d), float(b - d))
    return t2, f_stat, p


def marginal_t_tests(gradients) -> list[tuple[float, float]]:
    """Two-sided one-sample t test per gradient component."""
    g = np.asarray(gradients, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    b, d = g.shape
    if b < 2:
        raise ValueError("need at least two replicates for a t test")
    out = []
    for k in range(d):
        col = g[:, k]
        mean = float(col.mean())
        sd = float(col.std(ddof=1))
        if sd == 0.0:
            if mean == 0.0:
                out.append((0.0, 1.0))
                continue
            raise ZeroVariance(
                f"gradient column {k} is constant and nonzero", column=k
            )
        t = mean / (sd / np.sqrt(b))
        p = 2.0 * cdf("student_t", -abs(t), float(b - 1))
        out.append((float(t), float(p)))
    return out


def decide_verdict(
    hotelling_p: float, marginal_ps, alpha: float
) -> tuple[str, tuple]:
    """Verdict ladder: the joint test drives the call; marginal rejections
    are reported only when the joint test does not reject."""
    if hotelling_p < alpha:
        return VERDICT_JOINT, tuple()
    flagged = tuple(k for k, p in enumerate(marginal_ps) if p < alpha)
    if flagged:
        return VERDICT_COMPONENTS, flagged
    return VERDICT_NO_EVIDENCE, tuple()


def assess_consistency(
    model: VariationalModel,
    theta_star,
    template: Dataset,
    b: int = 10_000,
    alpha: float = 0.01,
    rng: RngStream = RngStream(0, 0),
    config: FitConfig = FitConfig(),
) -> ConsistencyReport:
    """Full assessment: simulate, profile, test, and report a verdict.

    The verdict is ``inconsistent_joint`` exactly when the Hotelling p value
    falls below ``alpha``; otherwise components whose marginal t tests
    reject are listed under ``inconsistent_components``; otherwise
    ``no_evidence_of_inconsistency``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    grads = consistency_gradients(model, theta_star, template, b, rng, config)
    t2, f_stat, p_joint = hotelling_t2(grads)
    marginals = marginal_t_tests(grads)
    verdict, flagged = decide_verdict(p_joint, [p for _, p in marginals], alpha)
    return ConsistencyReport(
        theta_star=as_vec(theta_star, dim=model.dim_theta),
        b=b,
        alpha=alpha,
        gradients=grads,
        column_means=grads.mean(axis=0),
        marginal_t=tuple(marginals),
        hotelling=(t2, f_stat, p_joint),
        verdict=verdict,
        components=flagged,
    )
