import json
import subprocess
import sys

import pytest

from spi.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from spi.output import read_csv


def small_config(tmp_path, name="cfg.json", **over):
    doc = {
        "schema_version": 1,
        "dimension": 2,
        "motion": {"q": 0.001, "duration": 6.0, "input_segment": 2.0},
        "sensor": {"kind": "position", "covariance": 0.0064},
        "accuracy": {"ka": [0.05, 0.1]},
        "schedule": {"rate": "solve"},
        "trials": {"count": 2, "base_seed": 7},
        "output": {"directory": str(tmp_path / "out")},
    }
    for k, v in over.items():
        doc[k] = v
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_schedule_command(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["schedule", "--config", cfg]) == EXIT_OK
    doc = json.loads((tmp_path / "out" / "schedule.json").read_text())
    r = doc["results"][0]
    assert r["status"] == "optimal" and abs(r["rate_hz"] - 1.424) < 1e-5


def test_schedule_per_step(tmp_path):
    cfg = small_config(tmp_path, schedule={"rate": "solve", "mode": "per-step"})
    assert main(["schedule", "--config", cfg, "--max-steps", "3"]) == EXIT_OK
    doc = json.loads((tmp_path / "out" / "schedule.json").read_text())
    assert len(doc["results"][0]["rates"]) == 3


def test_covariance_infeasible_exit(tmp_path):
    cfg = small_config(tmp_path, sensor={"kind": "position", "covariance": "solve"},
                       schedule={"rate": 20.0}, accuracy={"ka": [0.005]})
    assert main(["covariance", "--config", cfg]) == EXIT_INFEASIBLE
    doc = json.loads((tmp_path / "out" / "covariance.json").read_text())
    assert doc["results"][0]["status"] == "infeasible"
    assert "sqrt(Q/m)" in doc["results"][0]["certificate"]


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = small_config(tmp_path, accuracy={"ka": [0.0]})
    assert main(["schedule", "--config", cfg]) == EXIT_CONFIG
    assert "accuracy.ka[0]" in capsys.readouterr().err
    assert main(["schedule"]) == EXIT_CONFIG
    assert main(["schedule", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_pcrb_trace_csv(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["pcrb-trace", "--config", cfg, "--rate-divisor", "3"]) == EXIT_OK
    header, rows = read_csv(tmp_path / "out" / "pcrb_trace.csv")
    assert header == ["ka", "step", "t", "bound", "ka_sq", "violation", "rate_hz", "status"]
    assert rows and any(r[5] == "1" for r in rows)


def test_simulate_estimate_roundtrip(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["simulate", "--config", cfg]) == EXIT_OK
    for f in ("truth.csv", "inputs.csv", "measurements.csv", "simulate.json"):
        assert (tmp_path / "out" / f).exists()
    assert main(["estimate", "--config", cfg]) == EXIT_OK
    doc = json.loads((tmp_path / "out" / "estimate.json").read_text())
    assert doc["converged"] and doc["rmse_m"] < 0.1


def test_experiment_schema_and_determinism(tmp_path):
    cfg = small_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["experiment", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["experiment", "--config", cfg, "--out", str(b), "--jobs", "2"]) == EXIT_OK
    ta = (a / "rate_sweep.csv").read_text()
    assert ta == (b / "rate_sweep.csv").read_text()
    header, rows = read_csv(a / "rate_sweep.csv")
    assert header == ["ka", "variant", "trial", "solved_rate_hz", "rmse_m", "status", "solver_time_s", "note"]
    # 2 ka x 2 variants x (2 trials + mean)
    assert len(rows) == 12
    assert (a / "rate_sweep_optimal.dat").read_text().startswith("#")
    summary = json.loads((a / "rate_sweep_summary.json").read_text())
    assert len(summary["means"]) == 4


def test_seed_override_changes_output(tmp_path):
    cfg = small_config(tmp_path)
    main(["experiment", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["experiment", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8"])
    assert (tmp_path / "a" / "rate_sweep.csv").read_text() != (tmp_path / "b" / "rate_sweep.csv").read_text()


def test_covariance_sweep_columns(tmp_path):
    cfg = small_config(tmp_path, sensor={"kind": "position", "covariance": "solve"}, schedule={"rate": 20.0},
                       accuracy={"ka": [0.05]}, trials={"count": 1, "base_seed": 1})
    assert main(["experiment", "--config", cfg]) == EXIT_OK
    header, rows = read_csv(tmp_path / "out" / "covariance_sweep.csv")
    assert header[3:6] == ["solved_cov_11", "solved_cov_12", "solved_cov_22"]
    assert len(rows) == 4


def test_console_entry_point(tmp_path):
    cfg = small_config(tmp_path)
    r = subprocess.run([sys.executable, "-m", "spi", "schedule", "--config", cfg], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
