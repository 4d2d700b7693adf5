"""Replicated simulation studies: coverage, estimator variance, consistency.

Each replicate derives every random draw from ``RngStream(seed,
replicate_index)``, so results are identical whatever the worker count or
scheduling; replicates that raise are recorded and excluded, and the run
fails when more than 1% of them do. The only parallelism is across
replicates (one process pool, no nesting), controlled by the
``VICALIB_WORKERS`` environment variable.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache

import numpy as np

from ..consistency import assess_consistency
from ..errors import VicalibError
from ..models.expmix import ExpMixModel
from ..models.glmm_ri import GlmmRiModel, bootstrap_templates, synthetic_templates
from ..models.expmix_vb import fit_vb
from ..numkit import RngStream
from ..onestep import ml_wald_intervals, one_step
from ..sandwich import sandwich_cov, wald_intervals, wald_joint_test
from ..vcore import Dataset, FitConfig, fit_variational
from .io import SCHEMA_VERSION

WORKERS_ENV = "VICALIB_WORKERS"


class StudyFailed(VicalibError):
    """More than 1% of replicates raised; results would be biased."""


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        count = int(raw)
    except ValueError:
        raise VicalibError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, count)


def _fit_config(fit_cfg: dict, rng: RngStream) -> FitConfig:
    return FitConfig(
        inner_tol=float(fit_cfg["inner_tol"]),
        outer_tol=float(fit_cfg["outer_tol"]),
        max_inner_iter=int(fit_cfg["max_inner_iter"]),
        max_outer_iter=int(fit_cfg["max_outer_iter"]),
        multistart_count=int(fit_cfg["multistart_count"]),
        mode=str(fit_cfg["mode"]),
        rng=rng,
    )


def _covers(intervals, truth) -> list[bool]:
    return [bool(lo <= t <= hi) for (lo, hi), t in zip(intervals, truth)]


@lru_cache(maxsize=4)
def _synthetic_template_cached(n_subjects, n_visits, seed, age_min, age_max):
    return synthetic_templates(
        n_subjects, n_visits, RngStream(seed), age_min=age_min, age_max=age_max
    )


# ---------------------------------------------------------------------------
# replicate bodies (top level so process pools can pickle them)
# ---------------------------------------------------------------------------

def _expmix_replicate(task):
    rep = task["rep"]
    theta_true = np.asarray(task["theta_true"], dtype=float)
    lam_true = np.exp(theta_true)
    level = task["level"]
    base = RngStream(task["seed"], rep)
    model = ExpMixModel(misspecified=task["misspecified"])
    data = model.simulate_dataset(theta_true, task["n"], base.child(0))
    config = _fit_config(task["fit"], base.child(1))

    out = {"estimates": {}, "covers": {}, "joint": {}}
    fit = fit_variational(model, data, config)
    est = sandwich_cov(model, fit, data)
    intervals = wald_intervals(est, level)
    _, reject = wald_joint_test(est, theta_true, level)
    out["estimates"]["variational"] = fit.theta_hat.tolist()
    out["covers"]["variational"] = _covers(intervals, theta_true)
    out["joint"]["variational"] = not reject

    if "vb" in task["estimators"]:
        vb = fit_vb(data)
        ints = [
            vb.lambda1.credible_interval(level),
            vb.lambda2.credible_interval(level),
        ]
        out["estimates"]["vb"] = [vb.lambda1.mean, vb.lambda2.mean]
        out["covers"]["vb"] = _covers(ints, lam_true)
        out["joint"]["vb"] = vb.joint_region_covers(lam_true[0], lam_true[1], level)

    if "onestep" in task["estimators"]:
        result = one_step(model, fit, data)
        ints = ml_wald_intervals(result, level)
        out["estimates"]["onestep"] = result.theta_onestep.tolist()
        out["covers"]["onestep"] = _covers(ints, theta_true)
        out["joint"]["onestep"] = None
    return out


def _glmm_replicate(task):
    rep = task["rep"]
    theta_true = np.asarray(task["theta_true"], dtype=float)
    level = task["level"]
    base = RngStream(task["seed"], rep)
    model = GlmmRiModel(
        n_fixed=theta_true.size - 1,
        gh_order=task["gh_order"],
        marginal_gh_order=task["marginal_gh_order"],
    )
    template = _synthetic_template_cached(
        task["template_subjects"],
        task["template_visits"],
        task["template_seed"],
        task["age_min"],
        task["age_max"],
    )
    designs = bootstrap_templates(template, task["n"], base.child(0))
    sim_stream = base.child(1)
    subjects = tuple(
        model.simulate(theta_true, designs[i], sim_stream.child(i))
        for i in range(task["n"])
    )
    data = Dataset(data=subjects, source=f"glmm-replicate-{rep}")
    config = _fit_config(task["fit"], base.child(2))

    out = {"estimates": {}, "covers": {}, "joint": {}}
    fit = fit_variational(model, data, config)
    est = sandwich_cov(model, fit, data)
    intervals = wald_intervals(est, level)
    _, reject = wald_joint_test(est, theta_true, level)
    out["estimates"]["variational"] = fit.theta_hat.tolist()
    out["covers"]["variational"] = _covers(intervals, theta_true)
    out["joint"]["variational"] = not reject

    mle_start = fit.theta_hat
    if "onestep" in task["estimators"]:
        result = one_step(model, fit, data)
        ints = ml_wald_intervals(result, level)
        out["estimates"]["onestep"] = result.theta_onestep.tolist()
        out["covers"]["onestep"] = _covers(ints, theta_true)
        out["joint"]["onestep"] = None
        mle_start = result.theta_onestep  # one Newton step away from the MLE

    if "direct_mle" in task["estimators"]:
        mle = model.direct_mle(data, theta0=mle_start)
        out["estimates"]["direct_mle"] = mle.theta_hat.tolist()
        out["covers"]["direct_mle"] = None
        out["joint"]["direct_mle"] = None
    return out


def _replicate_entry(payload):
    kind, task = payload
    try:
        body = _expmix_replicate if kind == "expmix" else _glmm_replicate
        return ("ok", body(task))
    except Exception as exc:  # recorded per replicate; policy applied later
        return ("error", f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# study driver
# ---------------------------------------------------------------------------

def _parameter_names(model_id: str, theta_true) -> list[str]:
    if model_id == "expmix":
        return ["log_lambda1", "log_lambda2"]
    p = len(theta_true) - 1
    return [f"beta_{j}" for j in range(p)] + ["log_sigma2"]


_DEFAULT_ESTIMATORS = {
    "expmix": ("variational", "vb"),
    "glmm-ri": ("variational", "onestep", "direct_mle"),
}


def _build_tasks(run_cfg: dict) -> tuple[str, list]:
    model_cfg = run_cfg.get("model", {})
    study_cfg = run_cfg["study"]
    model_id = model_cfg.get("id", "expmix")
    estimators = tuple(study_cfg.get("estimators", _DEFAULT_ESTIMATORS[model_id]))
    common = {
        "theta_true": list(study_cfg["theta_true"]),
        "n": int(study_cfg["n"]),
        "seed": int(study_cfg["seed"]),
        "level": float(study_cfg.get("level", 0.95)),
        "estimators": estimators,
        "fit": dict(run_cfg["fit_resolved"]),
    }
    if model_id == "expmix":
        common["misspecified"] = bool(model_cfg.get("misspecified", False))
    else:
        common["gh_order"] = int(model_cfg.get("gh_order", 20))
        common["marginal_gh_order"] = int(model_cfg.get("marginal_gh_order", 30))
        common["template_subjects"] = int(model_cfg.get("template_subjects", common["n"]))
        common["template_visits"] = int(model_cfg.get("template_visits", 6))
        common["template_seed"] = int(model_cfg.get("template_seed", 1234))
        common["age_min"] = float(model_cfg.get("age_min", 12.0))
        common["age_max"] = float(model_cfg.get("age_max", 35.0))
    replicates = int(study_cfg["replicates"])
    tasks = []
    for rep in range(replicates):
        task = dict(common)
        task["rep"] = rep
        tasks.append((model_id if model_id == "expmix" else "glmm", task))
    return model_id, tasks


def run_study(run_cfg: dict, fit_cfg: dict) -> dict:
    """Execute one study profile and return the report mapping.

    ``run_cfg`` is a resolved single-run config; ``fit_cfg`` the merged
    [fit] table. The report is deterministic given the study seed apart
    from the ``runtime`` entry.
    """
    run_cfg = dict(run_cfg)
    run_cfg["fit_resolved"] = fit_cfg
    study_cfg = run_cfg["study"]
    if int(study_cfg["replicates"]) < 1:
        raise VicalibError("a study needs at least one replicate")
    level = float(study_cfg.get("level", 0.95))
    if not 0.0 < level < 1.0:
        raise VicalibError(f"confidence level must lie in (0, 1), got {level}")
    model_id, tasks = _build_tasks(run_cfg)
    theta_true = list(study_cfg["theta_true"])
    names = _parameter_names(model_id, theta_true)
    estimators = tasks[0][1]["estimators"]

    workers = worker_count()
    started = time.monotonic()
    if workers == 1:
        raw = [_replicate_entry(t) for t in tasks]
    else:
        chunk = max(1, len(tasks) // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_replicate_entry, tasks, chunksize=chunk))
    elapsed = time.monotonic() - started

    results = []
    failures = []
    for rep, (status, payload) in enumerate(raw):
        if status == "ok":
            results.append(payload)
        else:
            failures.append({"index": rep, "error": payload})
    if len(failures) > max(1, len(tasks) // 100):
        raise StudyFailed(
            f"{len(failures)} of {len(tasks)} replicates failed; first: "
            f"{failures[0]['error']}"
        )
    if not results:
        raise StudyFailed("all replicates failed")

    report_estimators = {}
    for estimator in estimators:
        records = np.array([r["estimates"][estimator] for r in results])
        if model_id == "expmix" and estimator == "vb":
            est_names = ["lambda1", "lambda2"]
            scale = "rate"
        else:
            est_names = names
            scale = "log" if model_id == "expmix" else "natural"
        covers = [r["covers"][estimator] for r in results]
        has_cover = covers[0] is not None
        cover_arr = np.array(covers, dtype=float) if has_cover else None
        joints = [r["joint"][estimator] for r in results]
        has_joint = joints[0] is not None
        params = []
        for k, name in enumerate(est_names):
            params.append(
                {
                    "name": name,
                    "mean": float(records[:, k].mean()),
                    "variance": float(records[:, k].var(ddof=1)),
                    "coverage": float(cover_arr[:, k].mean()) if has_cover else None,
                }
            )
        report_estimators[estimator] = {
            "scale": scale,
            "parameters": params,
            "joint_coverage": float(np.mean([bool(j) for j in joints]))
            if has_joint
            else None,
        }

    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "study",
        "model": {"id": model_id, **run_cfg.get("model", {})},
        "study": dict(study_cfg),
        "fit": dict(fit_cfg),
        "estimators": report_estimators,
        "replicates": {
            "requested": len(tasks),
            "used": len(results),
            "failures": failures,
        },
        "runtime": {"seconds": elapsed, "workers": workers},
    }
    return report


def study_csv_rows(report: dict) -> list[dict]:
    rows = []
    for estimator, table in sorted(report["estimators"].items()):
        for param in table["parameters"]:
            rows.append(
                {
                    "estimator": estimator,
                    "parameter": param["name"],
                    "scale": table["scale"],
                    "mean": param["mean"],
                    "variance": param["variance"],
                    "coverage": param["coverage"],
                }
            )
        if table["joint_coverage"] is not None:
            rows.append(
                {
                    "estimator": estimator,
                    "parameter": "joint",
                    "scale": table["scale"],
                    "mean": None,
                    "variance": None,
                    "coverage": table["joint_coverage"],
                }
            )
    return rows


# ---------------------------------------------------------------------------
# consistency study support
# ---------------------------------------------------------------------------

def consistency_report_dict(report, model_id: str) -> dict:
    sds = report.gradients.std(axis=0, ddof=1)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "consistency",
        "model": model_id,
        "theta_star": report.theta_star.tolist(),
        "b": report.b,
        "alpha": report.alpha,
        "column_means": report.column_means.tolist(),
        "column_sds": sds.tolist(),
        "marginal_t": [
            {"statistic": t, "p_value": p} for t, p in report.marginal_t
        ],
        "hotelling": {
            "t2": report.hotelling[0],
            "f": report.hotelling[1],
            "p_value": report.hotelling[2],
        },
        "verdict": report.verdict,
        "components": list(report.components),
        "caveat": report.caveat,
    }


def run_consistency(
    model,
    model_id: str,
    theta_star,
    template,
    reps: int,
    alpha: float,
    seed: int,
    fit_cfg: dict,
    dump_gradients: bool = False,
) -> dict:
    report = assess_consistency(
        model,
        theta_star,
        template,
        b=reps,
        alpha=alpha,
        rng=RngStream(seed),
        config=_fit_config(fit_cfg, RngStream(seed, 1)),
    )
    doc = consistency_report_dict(report, model_id)
    if dump_gradients:
        doc["gradients"] = report.gradients.tolist()
    return doc
