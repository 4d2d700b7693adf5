"""File formats: CSV data schemas and deterministic JSON reports.

CSV schemas
-----------
Exponential mixture: header ``x1,x2``, one positive decimal pair per row.
Random-intercept logistic (long format): header ``id,y,<covariate...>``;
rows grouped by ``id`` in order of first appearance, ``y`` binary, and the
covariate columns are used verbatim as the design matrix (no implicit
intercept is added).

JSON reports are emitted with sorted keys, UTF-8, LF endings, and every
float rendered with 17 significant digits, so identical results serialize
to identical bytes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..errors import DataFormatError
from ..models.expmix import ExpMixDatum
from ..models.glmm_ri import GlmmSubject
from ..vcore import Dataset

SCHEMA_VERSION = "1"


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _render(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        if math.isnan(val) or math.isinf(val):
            return "null"
        return format(val, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _render(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_render(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        return (
            "{"
            + ", ".join(f"{json.dumps(str(k))}: {_render(v)}" for k, v in items)
            + "}"
        )
    raise TypeError(f"cannot serialize {type(obj).__name__} to report JSON")


def dump_json(obj, path) -> None:
    Path(path).write_text(_render(obj) + "\n", encoding="utf-8", newline="\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# exponential-mixture CSV
# ---------------------------------------------------------------------------

def write_expmix_csv(path, data: Dataset) -> None:
    lines = ["x1,x2"]
    for d in data:
        lines.append(f"{_fmt(d.x1)},{_fmt(d.x2)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_expmix_csv(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"data file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "x1,x2":
        raise DataFormatError(f"{path}: expected header 'x1,x2'")
    datums = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataFormatError(f"{path}: line {lineno}: expected two columns")
        try:
            x1, x2 = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
        try:
            datums.append(ExpMixDatum(x1, x2))
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
    if not datums:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(data=tuple(datums), source=str(path))


# ---------------------------------------------------------------------------
# random-intercept logistic CSV (long format)
# ---------------------------------------------------------------------------

def write_glmm_csv(path, data: Dataset, columns: list[str] | None = None) -> None:
    n_cols = data[0].design.shape[1]
    if columns is None:
        columns = [f"x{j + 1}" for j in range(n_cols)]
    if len(columns) != n_cols:
        raise ValueError("column name count must match design width")
    lines = ["id,y," + ",".join(columns)]
    for i, subject in enumerate(data):
        for row, resp in zip(subject.design, subject.y):
            vals = ",".join(_fmt(v) for v in row)
            lines.append(f"{i + 1},{int(resp)},{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_glmm_csv(path) -> tuple[Dataset, list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"data file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if len(header) < 3 or header[0] != "id" or header[1] != "y":
        raise DataFormatError(
            f"{path}: expected header 'id,y,<covariate columns...>'"
        )
    columns = header[2:]
    order: list[str] = []
    rows: dict[str, list[tuple[float, list[float]]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataFormatError(
                f"{path}: line {lineno}: expected {len(header)} columns"
            )
        sid = parts[0].strip()
        try:
            y = float(parts[1])
            covs = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
        if y not in (0.0, 1.0):
            raise DataFormatError(f"{path}: line {lineno}: y must be 0 or 1")
        if not all(math.isfinite(c) for c in covs):
            raise DataFormatError(f"{path}: line {lineno}: non-finite covariate")
        if sid not in rows:
            rows[sid] = []
            order.append(sid)
        rows[sid].append((y, covs))
    if not order:
        raise DataFormatError(f"{path}: no data rows")
    subjects = []
    for sid in order:
        y = np.array([r[0] for r in rows[sid]])
        design = np.array([r[1] for r in rows[sid]])
        subjects.append(GlmmSubject(design=design, y=y))
    return Dataset(data=tuple(subjects), source=str(path)), columns


def write_study_csv(path, rows: list[dict]) -> None:
    """Flat table: one row per estimator and parameter."""
    header = ["estimator", "parameter", "scale", "mean", "variance", "coverage"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(
                "" if row.get(k) is None else (_fmt(row[k]) if isinstance(row[k], float) else str(row[k]))
                for k in header
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
