import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from darwinfit.cli import RunConfig, main
from darwinfit.output import read_diagnostics, read_vtk_scalars

SCEN = Path(__file__).resolve().parents[1] / "scenarios"


def run(*args):
    return main([str(a) for a in args])


def test_eqs_limit_run(tmp_path):
    out = tmp_path / "eqs"
    assert run("run", SCEN / "eqs_limit.json", "--out", out) == 0
    d = read_diagnostics(out / "diagnostics.csv")
    assert len(d["step"]) == 10 and np.array_equal(d["step"], np.arange(1, 11))
    assert np.all(d["W_m"] <= 1e-4 * d["W_e"].max())
    m = json.loads((out / "manifest.json").read_text())
    assert m["status"] == "ok" and m["scheme"] == "two_step"
    assert m["dofs"]["a"] > 0 and m["dofs"]["phi"] + m["dofs"]["fixed_nodes"] == m["grid"]["nodes"]
    assert [s["step"] for s in m["snapshots"]] == [5, 10]
    for s in m["snapshots"]:
        data = read_vtk_scalars(out / s["file"])
        assert data["E_mag"].size == m["grid"]["cells"]


def test_csv_bitwise_reproducible(tmp_path):
    args = ["run", SCEN / "coil.json", "--steps", "6", "--seed", "3"]
    assert run(*args, "--out", tmp_path / "a", "--no-timing") == 0
    assert run(*args, "--out", tmp_path / "b", "--no-timing") == 0
    assert (tmp_path / "a/diagnostics.csv").read_bytes() == (tmp_path / "b/diagnostics.csv").read_bytes()
    assert run(*args, "--out", tmp_path / "c") == 0
    a, c = read_diagnostics(tmp_path / "a/diagnostics.csv"), read_diagnostics(tmp_path / "c/diagnostics.csv")
    for col in a:
        if col != "wall_s":
            assert np.array_equal(a[col], c[col])


def test_snapshot_times_and_dt_override(tmp_path):
    out = tmp_path / "o"
    assert run("run", SCEN / "eqs_limit.json", "--out", out, "--dt", "1.25e-8",
               "--snap-at", "5e-8", "1.0e-7") == 0
    d = read_diagnostics(out / "diagnostics.csv")
    assert len(d["step"]) == 20 and d["t"][-1] == pytest.approx(2.5e-7, rel=1e-12)
    m = json.loads((out / "manifest.json").read_text())
    # the scenario cadence (every 5 steps) still applies beside the requested times
    assert [(s["step"], s["reason"]) for s in m["snapshots"]] == [
        (4, "time"), (5, "cadence"), (8, "time"), (10, "cadence"), (15, "cadence"), (20, "cadence")]
    assert m["config"]["dt"] == 1.25e-8


def test_scheme_override(tmp_path):
    out = tmp_path / "gs"
    assert run("run", SCEN / "eqs_limit.json", "--out", out, "--scheme", "gauss_seidel",
               "--steps", "3") == 0
    assert json.loads((out / "manifest.json").read_text())["scheme"] == "gauss_seidel"


def test_exit_code_invalid_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": 1}))
    assert run("run", bad, "--out", tmp_path / "o") == 2
    assert "invalid scenario" in capsys.readouterr().err
    assert run("run", SCEN / "eqs_limit.json", "--out", tmp_path / "o", "--snap-every", "0") == 2


def test_exit_code_io(tmp_path):
    assert run("run", tmp_path / "missing.json", "--out", tmp_path / "o") == 4
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("run", SCEN / "eqs_limit.json", "--out", blocker / "sub") == 4


def test_exit_code_solver_failure(tmp_path, capsys):
    doc = json.loads((SCEN / "eqs_limit.json").read_text())
    doc["stepper"].update(scheme="monolithic", kappa_reg=0.0)
    p = tmp_path / "sing.json"
    p.write_text(json.dumps(doc))
    assert run("run", p, "--out", tmp_path / "o") == 3
    assert "solver" in capsys.readouterr().err


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(Path("a"), Path("b"), snap_every=0)
    with pytest.raises(ValueError):
        RunConfig(Path("a"), Path("b"), overrides={"colour": 1})
    RunConfig(Path("a"), Path("b"), overrides={"dt": 1.0, "eqs_tol": 1e-8, "steps": 3})


def test_verify_operators(capsys):
    assert run("verify", "operators", "--seed", "2") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["suite"] == "operators" and report["passed"]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "darwinfit", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "darwinfit" in r.stdout
