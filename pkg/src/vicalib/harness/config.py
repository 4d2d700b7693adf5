"""TOML configuration with fail-fast validation.

A single-run file carries the tables ``[model]``, ``[study]``, ``[fit]``
and ``[diagnostics]``. A multi-run file nests the same tables under
``[run.<name>.<table>]`` so one file can document several study profiles
(for instance desk-scale and full-scale variants side by side); the study
command then selects one with ``--run``. Unknown keys anywhere are an
error.
"""

from __future__ import annotations

import sys
from pathlib import Path

from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_MODEL_KEYS = {
    "id",
    "misspecified",
    "gh_order",
    "marginal_gh_order",
    "template_subjects",
    "template_visits",
    "template_seed",
    "age_min",
    "age_max",
}
_STUDY_KEYS = {
    "theta_true",
    "n",
    "replicates",
    "seed",
    "level",
    "estimators",
    "label",
}
_FIT_KEYS = {
    "inner_tol",
    "outer_tol",
    "max_inner_iter",
    "max_outer_iter",
    "multistart_count",
    "mode",
    "seed",
}
_DIAG_KEYS = {"reps", "alpha", "seed"}

_TABLES = {
    "model": _MODEL_KEYS,
    "study": _STUDY_KEYS,
    "fit": _FIT_KEYS,
    "diagnostics": _DIAG_KEYS,
}

_MODEL_IDS = ("expmix", "glmm-ri")

DEFAULT_FIT = {
    "inner_tol": 1e-10,
    "outer_tol": 1e-8,
    "max_inner_iter": 200,
    "max_outer_iter": 500,
    "multistart_count": 5,
    "mode": "quasinewton",
    "seed": 0,
}


def _check_table(name: str, table: dict) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = _TABLES[name]
    unknown = set(table) - known
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}"
        )


def _check_run(run: dict, context: str) -> None:
    unknown = set(run) - set(_TABLES)
    if unknown:
        raise ConfigError(
            f"unknown table(s) in {context}: {', '.join(sorted(unknown))}"
        )
    for name, table in run.items():
        _check_table(name, table)
    model = run.get("model", {})
    if "id" in model and model["id"] not in _MODEL_IDS:
        raise ConfigError(
            f"unknown model id {model['id']!r}; expected one of {_MODEL_IDS}"
        )


def load_config(path) -> dict:
    """Parse and validate a config file; returns the raw mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if "run" in raw:
        extra = set(raw) - {"run"}
        if extra:
            raise ConfigError(
                f"multi-run config may only contain [run.*] tables, found: {sorted(extra)}"
            )
        if not isinstance(raw["run"], dict) or not raw["run"]:
            raise ConfigError("[run] must contain at least one named run")
        for name, run in raw["run"].items():
            _check_run(run, f"[run.{name}]")
        return raw
    _check_run(raw, str(path))
    return raw


def resolve_run(config: dict, run_name: str | None) -> dict:
    """Pick one run out of a (possibly multi-run) config mapping."""
    if "run" not in config:
        if run_name is not None:
            raise ConfigError("--run given but the config has no [run.*] tables")
        return config
    runs = config["run"]
    if run_name is None:
        if len(runs) == 1:
            return next(iter(runs.values()))
        raise ConfigError(
            f"config defines several runs ({', '.join(sorted(runs))}); pick one with --run"
        )
    if run_name not in runs:
        raise ConfigError(
            f"run {run_name!r} not found; available: {', '.join(sorted(runs))}"
        )
    return runs[run_name]


def fit_settings(run: dict) -> dict:
    """[fit] table merged over defaults."""
    merged = dict(DEFAULT_FIT)
    merged.update(run.get("fit", {}))
    return merged
