"""Command-line interface.

Subcommands
-----------
fit                   two-stage variational fit of a CSV dataset
simulate              draw a synthetic dataset to CSV
diagnose-consistency  mean-zero gradient assessment at a parameter value
study                 replicated coverage / variance study from a TOML config
onestep               Newton correction of a stored fit

Exit codes: 0 success (for diagnose-consistency: regardless of verdict),
1 input/validation errors, 2 numerical failure (no converged start,
singular information).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from ..errors import (
    ConfigError,
    DataFormatError,
    InfoSingular,
    NoConvergedStart,
    VicalibError,
)
from ..models.expmix import ExpMixModel
from ..models.glmm_ri import GlmmRiModel, synthetic_templates
from ..numkit import RngStream
from ..onestep import ml_wald_intervals, one_step
from ..vcore import FitConfig, fit_variational
from . import io
from .config import fit_settings, load_config, resolve_run
from .studies import StudyFailed, run_consistency, run_study, study_csv_rows

MODEL_IDS = ("expmix", "glmm-ri")


def _fail(message: str, code: int = 1) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _parse_theta(raw: str) -> np.ndarray:
    try:
        values = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--theta must be a JSON array: {exc}") from exc
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ConfigError("--theta must be a flat JSON array")
    return arr


def _load_run(config_path, run_name=None) -> dict:
    if config_path is None:
        return {}
    return resolve_run(load_config(config_path), run_name)


def _build_model(model_id: str, model_cfg: dict, n_fixed: int | None = None):
    if model_id == "expmix":
        return ExpMixModel(misspecified=bool(model_cfg.get("misspecified", False)))
    if model_id == "glmm-ri":
        if n_fixed is None:
            raise ConfigError("glmm-ri needs a dataset or template to fix the design width")
        return GlmmRiModel(
            n_fixed=n_fixed,
            gh_order=int(model_cfg.get("gh_order", 20)),
            marginal_gh_order=int(model_cfg.get("marginal_gh_order", 30)),
        )
    raise ConfigError(f"unknown model {model_id!r}")


def _read_data(model_id: str, path):
    if model_id == "expmix":
        return io.read_expmix_csv(path), None
    data, columns = io.read_glmm_csv(path)
    return data, columns


def _fit_config_from(run: dict, seed_override=None) -> FitConfig:
    merged = fit_settings(run)
    seed = int(merged["seed"]) if seed_override is None else int(seed_override)
    return FitConfig(
        inner_tol=float(merged["inner_tol"]),
        outer_tol=float(merged["outer_tol"]),
        max_inner_iter=int(merged["max_inner_iter"]),
        max_outer_iter=int(merged["max_outer_iter"]),
        multistart_count=int(merged["multistart_count"]),
        mode=str(merged["mode"]),
        rng=RngStream(seed),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    try:
        run = _load_run(args.config)
        data, columns = _read_data(args.model, args.data)
        n_fixed = len(columns) if columns is not None else None
        model = _build_model(args.model, run.get("model", {}), n_fixed=n_fixed)
        config = _fit_config_from(run)
    except (ConfigError, DataFormatError, OSError) as exc:
        return _fail(str(exc))
    try:
        fit = fit_variational(model, data, config)
    except NoConvergedStart as exc:
        _fail(str(exc), code=2)
        return 2
    except VicalibError as exc:
        return _fail(str(exc))
    psi = fit.psi_hat
    artifact = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "fit",
        "model": args.model,
        "n": data.n,
        "theta_hat": fit.theta_hat.tolist(),
        "criterion_value": fit.criterion_value,
        "converged": fit.converged,
        "start_index": fit.start_index,
        "psi_summary": {
            "mean": psi.mean(axis=0).tolist(),
            "sd": psi.std(axis=0, ddof=1 if psi.shape[0] > 1 else 0).tolist(),
            "min": psi.min(axis=0).tolist(),
            "max": psi.max(axis=0).tolist(),
        },
        "trace": [[int(i), float(c), float(g)] for i, c, g in fit.trace],
        "config": {
            "inner_tol": config.inner_tol,
            "outer_tol": config.outer_tol,
            "max_inner_iter": config.max_inner_iter,
            "max_outer_iter": config.max_outer_iter,
            "multistart_count": config.multistart_count,
            "mode": config.mode,
            "seed": config.rng.master_seed,
        },
        "columns": columns,
        "data_path": str(args.data),
    }
    io.dump_json(artifact, args.out)
    return 0


def cmd_simulate(args) -> int:
    try:
        theta = _parse_theta(args.theta)
        run = _load_run(args.config)
        model_cfg = run.get("model", {})
        if args.model == "expmix":
            if theta.size != 2:
                raise ConfigError("expmix expects a 2-vector theta")
            model = ExpMixModel(misspecified=args.misspecified)
            data = model.simulate_dataset(theta, args.n, RngStream(args.seed))
            io.write_expmix_csv(args.out, data)
        else:
            if args.template is not None:
                template, columns = io.read_glmm_csv(args.template)
            else:
                template = synthetic_templates(
                    args.n,
                    int(model_cfg.get("template_visits", 6)),
                    RngStream(args.seed, 1),
                    age_min=float(model_cfg.get("age_min", 12.0)),
                    age_max=float(model_cfg.get("age_max", 35.0)),
                )
                columns = None
            n_fixed = template[0].design.shape[1]
            if theta.size != n_fixed + 1:
                raise ConfigError(
                    f"theta has {theta.size} entries but the design implies "
                    f"{n_fixed + 1}"
                )
            model = _build_model("glmm-ri", model_cfg, n_fixed=n_fixed)
            stream = RngStream(args.seed, 2)
            subjects = tuple(
                model.simulate(theta, template[i], stream.child(i))
                for i in range(template.n)
            )
            from ..vcore import Dataset

            io.write_glmm_csv(args.out, Dataset(data=subjects), columns=columns)
    except (ConfigError, DataFormatError, OSError) as exc:
        return _fail(str(exc))
    return 0


def cmd_diagnose(args) -> int:
    try:
        run = _load_run(args.config)
        if (args.theta is None) == (args.from_fit is None):
            raise ConfigError("give exactly one of --theta or --from-fit")
        if args.from_fit is not None:
            fit_doc = io.load_json(args.from_fit)
            theta = np.asarray(fit_doc["theta_hat"], dtype=float)
            model_id = fit_doc["model"]
        else:
            theta = _parse_theta(args.theta)
            model_id = args.model
        if model_id is None:
            raise ConfigError("--model is required with --theta")
        template, columns = _read_data(model_id, args.template)
        n_fixed = len(columns) if columns is not None else None
        model = _build_model(model_id, run.get("model", {}), n_fixed=n_fixed)
        if theta.size != model.dim_theta:
            raise ConfigError(
                f"theta has {theta.size} entries, model needs {model.dim_theta}"
            )
        if args.reps < model.dim_theta + 1:
            raise ConfigError(
                f"--reps must be at least dim_theta + 1 = {model.dim_theta + 1}"
            )
        report = run_consistency(
            model,
            model_id,
            theta,
            template,
            reps=args.reps,
            alpha=args.alpha,
            seed=args.seed,
            fit_cfg=fit_settings(run),
            dump_gradients=args.dump_gradients,
        )
        io.dump_json(report, args.out)
        print(f"verdict: {report['verdict']}")
    except (ConfigError, DataFormatError, OSError, ValueError) as exc:
        return _fail(str(exc))
    except VicalibError as exc:
        return _fail(str(exc))
    return 0


def cmd_study(args) -> int:
    try:
        config = load_config(args.config)
        run = resolve_run(config, args.run)
        if "study" not in run or "theta_true" not in run.get("study", {}):
            raise ConfigError("the selected run needs a [study] table with theta_true")
        report = run_study(run, fit_settings(run))
        io.dump_json(report, args.out)
        if args.csv is not None:
            io.write_study_csv(args.csv, study_csv_rows(report))
    except (ConfigError, DataFormatError, OSError) as exc:
        return _fail(str(exc))
    except StudyFailed as exc:
        return _fail(str(exc))
    except VicalibError as exc:
        return _fail(str(exc))
    return 0


def cmd_onestep(args) -> int:
    try:
        fit_doc = io.load_json(args.fit)
        model_id = args.model or fit_doc.get("model")
        if model_id not in MODEL_IDS:
            raise ConfigError(f"unknown model {model_id!r}")
        data, columns = _read_data(model_id, args.data)
        n_fixed = len(columns) if columns is not None else None
        run = _load_run(args.config)
        model = _build_model(model_id, run.get("model", {}), n_fixed=n_fixed)
        theta = np.asarray(fit_doc["theta_hat"], dtype=float)
        if theta.size != model.dim_theta:
            raise ConfigError(
                f"fit has {theta.size} parameters but the data implies "
                f"{model.dim_theta}"
            )
    except (ConfigError, DataFormatError, OSError, KeyError) as exc:
        return _fail(str(exc))
    try:
        result = one_step(model, theta, data)
    except InfoSingular as exc:
        _fail(str(exc), code=2)
        return 2
    except VicalibError as exc:
        return _fail(str(exc))
    intervals = ml_wald_intervals(result, args.level)
    artifact = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "onestep",
        "model": model_id,
        "n": result.n,
        "theta_start": result.theta_start.tolist(),
        "score": result.score.tolist(),
        "obs_info": result.obs_info.tolist(),
        "theta_onestep": result.theta_onestep.tolist(),
        "ml_cov": result.ml_cov.tolist(),
        "step_norm": result.step_norm,
        "loglik_start": result.loglik_start,
        "loglik_onestep": result.loglik_onestep,
        "info_kind": result.info_kind,
        "intervals": {"level": args.level, "values": [list(iv) for iv in intervals]},
    }
    io.dump_json(artifact, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vicalib", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="variational fit of a CSV dataset")
    p_fit.add_argument("--model", required=True, choices=MODEL_IDS)
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--config", default=None)
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="simulate a dataset to CSV")
    p_sim.add_argument("--model", required=True, choices=MODEL_IDS)
    p_sim.add_argument("--theta", required=True, help="JSON array")
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--misspecified", action="store_true")
    p_sim.add_argument("--template", default=None)
    p_sim.add_argument("--config", default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_diag = sub.add_parser(
        "diagnose-consistency", help="mean-zero gradient assessment"
    )
    p_diag.add_argument("--model", choices=MODEL_IDS)
    p_diag.add_argument("--theta", default=None, help="JSON array")
    p_diag.add_argument("--from-fit", dest="from_fit", default=None)
    p_diag.add_argument("--reps", type=int, default=10_000)
    p_diag.add_argument("--alpha", type=float, default=0.01)
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--template", required=True)
    p_diag.add_argument("--out", required=True)
    p_diag.add_argument("--config", default=None)
    p_diag.add_argument("--dump-gradients", action="store_true")
    p_diag.set_defaults(func=cmd_diagnose)

    p_study = sub.add_parser("study", help="replicated simulation study")
    p_study.add_argument("--config", required=True)
    p_study.add_argument("--run", default=None)
    p_study.add_argument("--out", required=True)
    p_study.add_argument("--csv", default=None)
    p_study.set_defaults(func=cmd_study)

    p_one = sub.add_parser("onestep", help="one-step correction of a fit")
    p_one.add_argument("--fit", required=True)
    p_one.add_argument("--data", required=True)
    p_one.add_argument("--model", choices=MODEL_IDS, default=None)
    p_one.add_argument("--config", default=None)
    p_one.add_argument("--level", type=float, default=0.95)
    p_one.add_argument("--out", required=True)
    p_one.set_defaults(func=cmd_onestep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
