import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from vicalib.errors import ConfigError, DataFormatError
from vicalib.harness import io
from vicalib.harness.cli import main
from vicalib.harness.config import fit_settings, load_config, resolve_run
from vicalib.harness.studies import run_study, study_csv_rows
from vicalib.models import ExpMixModel, GlmmRiModel, synthetic_templates
from vicalib.numkit import RngStream
from vicalib.vcore import Dataset


# --- JSON writer ---------------------------------------------------------------

def test_json_floats_seventeen_significant_digits(tmp_path):
    path = tmp_path / "out.json"
    io.dump_json({"x": 0.1, "y": [1.0, 2.5e-300]}, path)
    text = path.read_text()
    assert "0.10000000000000001" in text
    parsed = json.loads(text)
    assert parsed["x"] == 0.1 and parsed["y"][1] == 2.5e-300


def test_json_sorted_keys_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    io.dump_json({"b": 1, "a": {"z": 2.0, "y": None, "ok": True}}, a)
    io.dump_json({"a": {"ok": True, "y": None, "z": 2.0}, "b": 1}, b)
    assert a.read_bytes() == b.read_bytes()


# --- CSV schemas ------------------------------------------------------------------

def test_expmix_csv_roundtrip(tmp_path):
    model = ExpMixModel()
    data = model.simulate_dataset([0.0, 0.0], 20, RngStream(3))
    path = tmp_path / "d.csv"
    io.write_expmix_csv(path, data)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2" and len(lines) == 21
    back = io.read_expmix_csv(path)
    assert back.n == 20
    np.testing.assert_allclose(
        [d.x1 for d in back], [d.x1 for d in data], rtol=0, atol=0
    )


def test_expmix_csv_validation_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,x2\n1.0,2.0\n-3.0,1.0\n")
    with pytest.raises(DataFormatError) as err:
        io.read_expmix_csv(path)
    assert "line 3" in str(err.value)


def test_glmm_csv_roundtrip(tmp_path):
    model = GlmmRiModel(n_fixed=6)
    template = synthetic_templates(5, 4, RngStream(9))
    sim = RngStream(10)
    subjects = tuple(
        model.simulate(np.array([0.0] * 6 + [0.5]), template[i], sim.child(i))
        for i in range(5)
    )
    path = tmp_path / "g.csv"
    io.write_glmm_csv(path, Dataset(data=subjects))
    back, columns = io.read_glmm_csv(path)
    assert columns == [f"x{j}" for j in range(1, 7)]
    assert back.n == 5
    for orig, rt in zip(subjects, back):
        np.testing.assert_array_equal(orig.y, rt.y)
        np.testing.assert_allclose(orig.design, rt.design, rtol=0, atol=0)


def test_glmm_csv_rejects_bad_response(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,y,x1\n1,0,0.5\n1,2,0.5\n")
    with pytest.raises(DataFormatError) as err:
        io.read_glmm_csv(path)
    assert "line 3" in str(err.value)


# --- config -------------------------------------------------------------------------

def test_config_unknown_key_fails(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[model]\nid = 'expmix'\nbogus = 1\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert "bogus" in str(err.value)


def test_config_unknown_table_fails(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[mystery]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_multi_run_resolution(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        "[run.alpha.model]\nid = 'expmix'\n[run.alpha.study]\nn = 10\n"
        "[run.beta.model]\nid = 'glmm-ri'\n"
    )
    config = load_config(path)
    run = resolve_run(config, "alpha")
    assert run["model"]["id"] == "expmix"
    with pytest.raises(ConfigError):
        resolve_run(config, None)  # ambiguous
    with pytest.raises(ConfigError):
        resolve_run(config, "gamma")
    merged = fit_settings(run)
    assert merged["multistart_count"] == 5


def test_shipped_paper_tables_config_parses():
    root = Path(__file__).resolve().parents[1]
    config = load_config(root / "paper_tables.toml")
    run = resolve_run(config, "tables23_glmm_desk")
    assert run["study"]["n"] == 300
    assert run["study"]["replicates"] == 300
    assert len(run["study"]["theta_true"]) == 7
    run = resolve_run(config, "table1_well_desk")
    assert run["study"]["replicates"] == 500


# --- CLI ----------------------------------------------------------------------------

def test_cli_simulate_fit_onestep_roundtrip_expmix(tmp_path, capsys):
    data = tmp_path / "d.csv"
    fit = tmp_path / "fit.json"
    one = tmp_path / "os.json"
    assert main([
        "simulate", "--model", "expmix", "--theta", "[0.0, 0.693]",
        "--n", "120", "--seed", "5", "--out", str(data),
    ]) == 0
    assert len(data.read_text().splitlines()) == 121
    assert main([
        "fit", "--model", "expmix", "--data", str(data), "--out", str(fit),
    ]) == 0
    doc = json.loads(fit.read_text())
    assert doc["schema_version"] == io.SCHEMA_VERSION
    assert len(doc["theta_hat"]) == 2 and doc["converged"] is True
    assert main([
        "onestep", "--fit", str(fit), "--data", str(data), "--out", str(one),
    ]) == 0
    osdoc = json.loads(one.read_text())
    assert osdoc["step_norm"] <= 1e-4  # the variational fit is already the MLE
    assert len(osdoc["intervals"]["values"]) == 2


def test_cli_simulate_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main([
            "simulate", "--model", "expmix", "--theta", "[0,0]",
            "--n", "30", "--seed", "11", "--out", str(out),
        ]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_simulate_glmm_template_preserves_subjects(tmp_path):
    template_path = tmp_path / "template.csv"
    out = tmp_path / "sim.csv"
    model = GlmmRiModel(n_fixed=6)
    template = synthetic_templates(7, 4, RngStream(2))
    io.write_glmm_csv(template_path, template)
    theta = "[0,0,0,0,0,0,0.5]"
    assert main([
        "simulate", "--model", "glmm-ri", "--theta", theta,
        "--n", "99", "--seed", "3", "--out", str(out),
        "--template", str(template_path),
    ]) == 0
    back, _ = io.read_glmm_csv(out)
    assert back.n == 7  # template subject count preserved, --n ignored


def test_cli_glmm_roundtrip(tmp_path):
    data = tmp_path / "g.csv"
    fit = tmp_path / "fit.json"
    one = tmp_path / "os.json"
    theta = "[-0.5,0.3,-0.2,-0.4,0.2,-0.1,0.0]"
    assert main([
        "simulate", "--model", "glmm-ri", "--theta", theta,
        "--n", "50", "--seed", "21", "--out", str(data),
    ]) == 0
    assert main(["fit", "--model", "glmm-ri", "--data", str(data), "--out", str(fit)]) == 0
    assert main(["onestep", "--fit", str(fit), "--data", str(data), "--out", str(one)]) == 0
    doc = json.loads(one.read_text())
    assert len(doc["theta_onestep"]) == 7


def test_cli_fit_missing_file(tmp_path, capsys):
    code = main([
        "fit", "--model", "expmix", "--data", str(tmp_path / "nope.csv"),
        "--out", str(tmp_path / "f.json"),
    ])
    assert code == 1
    assert "nope.csv" in capsys.readouterr().err


def test_cli_fit_invalid_row(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2\n1.0,1.0\n0.0,2.0\n")
    code = main([
        "fit", "--model", "expmix", "--data", str(bad),
        "--out", str(tmp_path / "f.json"),
    ])
    assert code == 1
    assert "line 3" in capsys.readouterr().err


def test_cli_diagnose_guard_and_run(tmp_path, capsys):
    data = tmp_path / "t.csv"
    out = tmp_path / "rep.json"
    main(["simulate", "--model", "expmix", "--theta", "[0,0]",
          "--n", "40", "--seed", "1", "--out", str(data)])
    code = main([
        "diagnose-consistency", "--model", "expmix", "--theta", "[0,0]",
        "--reps", "2", "--template", str(data), "--out", str(out), "--seed", "4",
    ])
    assert code == 1  # fewer replicates than parameters allow
    code = main([
        "diagnose-consistency", "--model", "expmix", "--theta", "[0,0]",
        "--reps", "400", "--template", str(data), "--out", str(out), "--seed", "4",
    ])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["kind"] == "consistency"
    assert doc["verdict"] in (
        "no_evidence_of_inconsistency",
        "inconsistent_joint",
        "inconsistent_components",
    )
    assert "verdict" in capsys.readouterr().out


def test_cli_diagnose_from_fit(tmp_path):
    data = tmp_path / "d.csv"
    fit = tmp_path / "fit.json"
    out = tmp_path / "rep.json"
    main(["simulate", "--model", "expmix", "--theta", "[0,0]",
          "--n", "150", "--seed", "8", "--out", str(data)])
    main(["fit", "--model", "expmix", "--data", str(data), "--out", str(fit)])
    code = main([
        "diagnose-consistency", "--from-fit", str(fit), "--reps", "300",
        "--template", str(data), "--out", str(out), "--seed", "4",
    ])
    assert code == 0


def test_cli_fit_exit_two_when_no_start_converges(tmp_path):
    data = tmp_path / "d.csv"
    config = tmp_path / "c.toml"
    main(["simulate", "--model", "expmix", "--theta", "[0,0]",
          "--n", "120", "--seed", "9", "--out", str(data)])
    config.write_text("[fit]\nmax_outer_iter = 1\nmultistart_count = 1\n")
    code = main(["fit", "--model", "expmix", "--data", str(data),
                 "--config", str(config), "--out", str(tmp_path / "f.json")])
    assert code == 2


def test_cli_onestep_exit_two_on_singular_information(tmp_path):
    data = tmp_path / "d.csv"
    fit = tmp_path / "fit.json"
    # identical rows give identical scores and a rank-one information matrix
    data.write_text("x1,x2\n" + "0.8,1.3\n" * 6)
    io.dump_json({"schema_version": "1", "kind": "fit", "model": "expmix",
                  "theta_hat": [0.2, 0.1]}, fit)
    code = main(["onestep", "--fit", str(fit), "--data", str(data),
                 "--out", str(tmp_path / "o.json")])
    assert code == 2


def test_cli_onestep_dimension_mismatch(tmp_path, capsys):
    data = tmp_path / "d.csv"
    fit = tmp_path / "fit.json"
    main(["simulate", "--model", "expmix", "--theta", "[0,0]",
          "--n", "30", "--seed", "2", "--out", str(data)])
    io.dump_json({"schema_version": "1", "kind": "fit", "model": "expmix",
                  "theta_hat": [0.0, 0.0, 0.0]}, fit)
    code = main(["onestep", "--fit", str(fit), "--data", str(data),
                 "--out", str(tmp_path / "o.json")])
    assert code == 1


def test_cli_study_runs_and_is_deterministic_across_workers(tmp_path):
    config = tmp_path / "study.toml"
    config.write_text(
        "[model]\nid = 'expmix'\n"
        "[study]\ntheta_true = [0.0, 0.0]\nn = 150\nreplicates = 8\nseed = 5\n"
        "estimators = ['variational', 'vb']\n"
        "[fit]\nmultistart_count = 2\n"
    )
    out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
    csv1 = tmp_path / "r1.csv"
    old = os.environ.get("VICALIB_WORKERS")
    try:
        os.environ["VICALIB_WORKERS"] = "1"
        assert main(["study", "--config", str(config), "--out", str(out1),
                     "--csv", str(csv1)]) == 0
        os.environ["VICALIB_WORKERS"] = "2"
        assert main(["study", "--config", str(config), "--out", str(out2)]) == 0
    finally:
        if old is None:
            os.environ.pop("VICALIB_WORKERS", None)
        else:
            os.environ["VICALIB_WORKERS"] = old
    doc1, doc2 = json.loads(out1.read_text()), json.loads(out2.read_text())
    doc1.pop("runtime"), doc2.pop("runtime")
    assert doc1 == doc2
    rows = csv1.read_text().splitlines()
    assert rows[0] == "estimator,parameter,scale,mean,variance,coverage"
    assert len(rows) > 4


def test_cli_study_config_errors(tmp_path, capsys):
    config = tmp_path / "bad.toml"
    config.write_text("[study]\nwhatever = 1\n")
    assert main(["study", "--config", str(config),
                 "--out", str(tmp_path / "x.json")]) == 1


# --- report schemas (golden key sets) --------------------------------------------------

def test_fit_report_schema(tmp_path):
    data = tmp_path / "d.csv"
    fit = tmp_path / "fit.json"
    main(["simulate", "--model", "expmix", "--theta", "[0,0]",
          "--n", "60", "--seed", "3", "--out", str(data)])
    main(["fit", "--model", "expmix", "--data", str(data), "--out", str(fit)])
    doc = json.loads(fit.read_text())
    assert set(doc) == {
        "schema_version", "kind", "model", "n", "theta_hat", "criterion_value",
        "converged", "start_index", "psi_summary", "trace", "config", "columns",
        "data_path",
    }
    assert set(doc["psi_summary"]) == {"mean", "sd", "min", "max"}


def test_kernel_backend_env_override():
    import subprocess
    import sys

    env = dict(os.environ, VICALIB_FORCE_NUMPY="1")
    out = subprocess.run(
        [sys.executable, "-c", "import vicalib; print(vicalib.kernel_backend)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_study_failure_policy(monkeypatch):
    from vicalib.harness import studies

    original = studies._expmix_replicate

    def flaky(task, bad=frozenset({3})):
        if task["rep"] in bad:
            raise RuntimeError("boom")
        return original(task)

    run = {
        "model": {"id": "expmix"},
        "study": {"theta_true": [0.0, 0.0], "n": 80, "replicates": 8, "seed": 2,
                  "estimators": ["variational"]},
    }
    monkeypatch.setattr(studies, "_expmix_replicate", flaky)
    report = run_study(run, fit_settings(run))
    assert report["replicates"]["used"] == 7
    assert report["replicates"]["failures"][0]["index"] == 3
    assert "boom" in report["replicates"]["failures"][0]["error"]

    def flakier(task):
        return flaky(task, bad=frozenset({3, 5}))

    monkeypatch.setattr(studies, "_expmix_replicate", flakier)
    with pytest.raises(studies.StudyFailed):
        run_study(run, fit_settings(run))


def test_study_validates_config():
    run = {
        "model": {"id": "expmix"},
        "study": {"theta_true": [0.0, 0.0], "n": 50, "replicates": 0, "seed": 1},
    }
    from vicalib.errors import VicalibError

    with pytest.raises(VicalibError):
        run_study(run, fit_settings(run))
    run["study"]["replicates"] = 2
    run["study"]["level"] = 1.5
    with pytest.raises(VicalibError):
        run_study(run, fit_settings(run))


def test_study_report_schema():
    run = {
        "model": {"id": "expmix"},
        "study": {"theta_true": [0.0, 0.0], "n": 100, "replicates": 4, "seed": 1,
                  "estimators": ["variational"]},
    }
    report = run_study(run, fit_settings(run))
    assert set(report) == {
        "schema_version", "kind", "model", "study", "fit", "estimators",
        "replicates", "runtime",
    }
    table = report["estimators"]["variational"]
    assert set(table) == {"scale", "parameters", "joint_coverage"}
    assert {p["name"] for p in table["parameters"]} == {"log_lambda1", "log_lambda2"}
    rows = study_csv_rows(report)
    assert all(set(r) == {"estimator", "parameter", "scale", "mean", "variance", "coverage"} for r in rows)
