import csv
import io
import json
import subprocess
import sys
import warnings
from types import SimpleNamespace

import pytest

from hrfem import cli
from hrfem import verify as V
from hrfem.assembly import SolverError
from hrfem.mesh import load_mesh


def run(argv, capsys):
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def test_verify_adjoint_exits_zero(capsys):
    code, out, _ = run(["verify", "--check", "adjoint", "--mesh", "crisscross:2"], capsys)
    assert code == cli.EXIT_OK
    rep = json.loads(out)
    assert rep["passed"] and rep["checks"]["adjoint"]["max_residual"] <= 1e-10


def test_solve_reports_stress_plus_rigid_dofs(capsys):
    code, out, _ = run(["solve", "--scheme", "hr", "--mesh", "crisscross:1", "--lambda", "1",
                        "--case", "trig-generic"], capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["ndof"] == 19 + 12
    assert summary["errors"]["div"] is not None


def test_study_has_one_row_per_level_and_lambda(capsys, tmp_path):
    argv = ["study", "--scheme", "hr", "--case", "divfree-locking", "--levels", "4", "--lambda", "1,1e6"]
    code, out, _ = run(argv, capsys)
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert tuple(rows[0]) == V.CSV_HEADER
    assert len(rows) - 1 == 8
    # byte-identical on rerun, also through --out
    path = tmp_path / "study.csv"
    assert run(argv + ["--out", str(path)], capsys)[0] == 0
    assert path.read_text() == out


def test_mesh_command_writes_readable_file(capsys, tmp_path):
    path = tmp_path / "m.txt"
    code, out, _ = run(["mesh", "--mesh", "crisscross:3", "--levels", "2", "--out", str(path)], capsys)
    assert code == 0
    assert load_mesh(path).nt == json.loads(out)["nt"] == 4 * 9 * 4


def test_solve_field_dump(capsys, tmp_path):
    path = tmp_path / "fields.csv"
    code, _, _ = run(["solve", "--scheme", "ks", "--mesh", "crisscross:2", "--out", str(path)], capsys)
    assert code == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "cell,x,y,u1,u2,s11,s12,s22"
    assert len(lines) == 1 + 16


@pytest.mark.parametrize("argv", [
    ["solve", "--scheme", "dg"],
    ["solve", "--lambda", "1,2"],
    ["solve", "--lambda", "-1"],
    ["solve", "--lambda", "abc"],
    ["solve", "--levels", "0"],
    ["solve", "--mu", "0"],
    ["solve", "--mesh", "hexagon:3"],
    ["solve", "--mesh", "file:/nonexistent/mesh.txt"],
    ["verify", "--check", "everything"],
    ["mesh"],
    ["frobnicate"],
    [],
    ["study", "--bogus"],
])
def test_usage_errors_exit_one(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == cli.EXIT_USAGE
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["status"] == "error"


def test_verification_failure_exits_two(capsys, monkeypatch):
    monkeypatch.setattr(V, "check_adjoint_matrix", lambda mesh: 1e-3)
    code, _, err = run(["verify", "--check", "adjoint", "--mesh", "crisscross:1", "--levels", "1"], capsys)
    assert code == cli.EXIT_VERIFY
    assert json.loads(err)["failed"] == ["adjoint"]


def test_solver_failure_exits_three(capsys, monkeypatch):
    def broken(*args, **kwargs):
        raise SolverError("relative residual 1e-3 exceeds 1e-9", 1e-3)

    monkeypatch.setattr(cli, "run_scheme", broken)
    code, _, err = run(["solve", "--mesh", "crisscross:1"], capsys)
    assert code == cli.EXIT_SOLVER
    assert json.loads(err)["residual"] == 1e-3


def test_study_solver_failure_keeps_partial_csv(capsys, monkeypatch):
    real = V.run_scheme

    def fail_on_refined(scheme, disc, params, load):
        if disc.mesh.nt > 64:
            raise SolverError("factorization failed")
        return real(scheme, disc, params, load)

    monkeypatch.setattr(V, "run_scheme", fail_on_refined)
    code, out, err = run(["study", "--levels", "2", "--lambda", "1"], capsys)
    assert code == cli.EXIT_SOLVER
    assert len(out.strip().splitlines()) == 1 + 1
    assert json.loads(err)["kind"] == "solver"


def test_nl_min_without_smooth_load_warns(monkeypatch):
    monkeypatch.setattr(cli, "manufactured_case", lambda name: SimpleNamespace(load_in_h1=False))
    with pytest.warns(UserWarning, match="H\\^1"):
        cli._warn_regularity(cli.RunConfig("solve", scheme="nl-min"))
    # other schemes make no regularity assumption
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cli._warn_regularity(cli.RunConfig("solve", scheme="hr"))


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hrfem", "verify", "--check", "dims", "--mesh", "crisscross:1",
                           "--levels", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["checks"]["dims"]["passed"]
