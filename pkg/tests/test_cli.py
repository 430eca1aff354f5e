import json
import subprocess
import sys

import numpy as np
import pytest

from conicflow import io
from conicflow.cli import main
from conicflow.errors import ConfigError
from conicflow.pipeline import load_config, parse_config_text, run

TORUS = """# null case
mesh.generator = flat_torus
mesh.n = 8
prescription = harmonic1
output_dir = {out}
report_interval = {interval}
"""


def write_cfg(tmp_path, name="run.cfg", out="out", interval=0.5, extra=""):
    path = tmp_path / name
    path.write_text(TORUS.format(out=out, interval=interval) + extra)
    return path


def test_config_parsing(tmp_path):
    cfg = load_config(write_cfg(tmp_path, extra="flow.grad_tol = 1e-7\nsolver.method = cg\n"))
    assert cfg.flow.grad_tol == 1e-7 and cfg.solver == "cg"
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.mesh_source == {"name": "flat_torus", "n": "8"}
    same = load_config(write_cfg(tmp_path, "b.cfg", extra="solver.method = cg\nflow.grad_tol = 1e-7\n"))
    assert same.config_hash == cfg.config_hash
    other = load_config(write_cfg(tmp_path, "c.cfg", extra="flow.grad_tol = 1e-6\n"))
    assert other.config_hash != cfg.config_hash


@pytest.mark.parametrize("text", [
    "mesh.generator = flat_torus\nprescription = harmonic1\n",            # no n
    "mesh.n = 8\nprescription = harmonic1\n",                              # no source
    "mesh.generator = flat_torus\nmesh.n = 8\n",                           # no prescription
    "mesh.generator = flat_torus\nmesh.n = 8\nprescription = h\nbogus = 1\n",
    "mesh.generator = flat_torus\nmesh.n = 8\nprescription = h\nflow.dt_min = 0.5\n",
    "mesh.generator = flat_torus\nmesh.n = 8\nprescription = h\nflow.grad_tol = -1\n",
    "mesh.generator = flat_torus\nmesh.n = 8\nprescription = h\nsolver.method = lu\n",
    "mesh.generator = flat_torus\nmesh.n = 8\nmesh.n = 9\nprescription = h\n",
    "just words\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_solve_writes_reports(tmp_path):
    path = write_cfg(tmp_path)
    assert main(["solve", str(path)]) == 0
    out = tmp_path / "out"
    report = json.loads((out / "report.json").read_text())
    cfg = load_config(path)
    assert report["config_hash"] == cfg.config_hash
    assert report["tolerances"]["grad_tol"] == 1e-8
    assert report["tolerances"]["energy_tol"] == 1e-4
    assert report["status"] == "converged" and report["exit_code"] == 0
    assert report["postprocess"]["residual_KW"]["dual"] <= 1e-8
    lines = (out / "timeseries.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash = {cfg.config_hash}"
    assert lines[1] == "t,J,dissipation,energy_gap,constraint_residual,grad_S_norm,mean_u,min_u,max_u"
    ts = np.genfromtxt(out / "timeseries.csv", delimiter=",", skip_header=2)
    assert np.all(np.diff(ts[:-1, 0]) >= 0.5 - 1e-12)
    assert ts[-1, 5] <= 1e-8
    final = (out / "final_state.csv").read_text().splitlines()
    assert final[1] == "vertex,u,curvature_of_e2u_g,pointwise_KW_residual"
    assert len(final) == 2 + 64
    # the field dump is readable as a field file
    assert io.read_field(out / "final_state.csv", 64).shape == (64,)


def test_solve_is_deterministic(tmp_path):
    path = write_cfg(tmp_path)
    assert main(["solve", str(path)]) == 0
    (tmp_path / "out").rename(tmp_path / "first")
    assert main(["solve", str(path)]) == 0
    for name in ("timeseries.csv", "final_state.csv", "report.json"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "out" / name).read_bytes()


def test_incompatible_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("mesh.generator = flat_torus\nmesh.n = 6\nprescription = constant:1\noutput_dir = o\n")
    assert main(["solve", str(path)]) == 3
    assert "int K < 0" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "report.json").read_text())["status"] == "incompatible"


def test_config_error_before_computation(tmp_path, capsys):
    path = write_cfg(tmp_path, extra="flow.dt_min = 0.5\n")
    assert main(["solve", str(path)]) == 1
    assert "dt_min" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_inconclusive_exit_code(tmp_path):
    path = write_cfg(tmp_path, extra="flow.t_max = 0.05\n")
    assert main(["solve", str(path)]) == 2
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["status"] == "inconclusive" and rep["flow"]["t"] >= 0.05


def test_numerical_error_exit_code(tmp_path):
    path = write_cfg(tmp_path, extra="flow.grad_tol = 1e-30\nflow.dt_min = 1e-4\n")
    assert main(["solve", str(path)]) == 4
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "StiffnessError" in rep["message"] and "dt" in rep["diagnostics"]


def test_run_api_with_mesh_file(tmp_path):
    assert main(["gen", "cone_sphere", "n=2", "betas=-0.9,-0.9,-0.9", str(tmp_path / "s.mesh")]) == 0
    cfg = parse_config_text(
        "mesh.file = s.mesh\nprescription = constant:-1\noutput_dir = neg\n", tmp_path)
    assert run(cfg) == 0
    rep = json.loads((tmp_path / "neg" / "report.json").read_text())
    assert rep["background"]["uniformized"]
    assert rep["background"]["gauss_bonnet"]["accepted"]
    assert rep["smallness"]["auto_satisfied"]
    assert abs(rep["postprocess"]["c_infinity"] - 1) < 1e-7
    assert io.read_mesh(tmp_path / "neg" / "background.mesh").vertex_count == 66


def test_never_uniformize_raw_mesh(tmp_path):
    main(["gen", "cone_sphere", "n=1", "betas=-0.9,-0.9,-0.9", str(tmp_path / "s.mesh")])
    cfg = parse_config_text(
        "mesh.file = s.mesh\nmesh.uniformize = never\nprescription = constant:-1\n", tmp_path)
    assert run(cfg) == 4


def test_gen_uniformize_verify(tmp_path, capsys):
    mesh = tmp_path / "p.mesh"
    assert main(["gen", "pillowcase", "n=4", str(mesh)]) == 0
    assert io.read_mesh(mesh).vertex_count == 2 * 25 - 16
    assert main(["gen", "flat_torus", "n=2", str(mesh)]) == 1
    assert main(["gen", "klein_bottle", "n=4", str(mesh)]) == 1
    assert main(["gen", "cone_sphere", "n=2 betas=-0.9,-0.9,-0.9", str(tmp_path / "s.mesh")]) == 0
    capsys.readouterr()
    assert main(["uniformize", str(tmp_path / "s.mesh"), str(tmp_path / "u.mesh")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["kappa_bar"] < 0 and info["gauss_bonnet"]["accepted"]
    assert "kappa_bar" in (tmp_path / "u.mesh").read_text().splitlines()[1]

    # exact constant solution of K = -1 on the uniformized sphere
    um = io.read_mesh(tmp_path / "u.mesh")
    from conicflow.functionals import ConstraintSpec, seed_on_constraint
    from conftest import Setup

    s = Setup(um)
    K = np.full(um.vertex_count, -1.0)
    u0 = seed_on_constraint(K, s.metric, s.ops, ConstraintSpec.for_metric(s.metric))
    io.write_field(tmp_path / "u.csv", u0)
    assert main(["verify", str(tmp_path / "u.mesh"), str(tmp_path / "u.csv"), "-K", "constant:-1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["passed"] and out["residual_KW"]["dual"] < 1e-12
    io.write_field(tmp_path / "z.csv", np.zeros(um.vertex_count))
    assert main(["verify", str(tmp_path / "u.mesh"), str(tmp_path / "z.csv"), "-K", "constant:-1"]) == 2
    assert main(["verify", str(tmp_path / "u.mesh"), str(tmp_path / "z.csv"), "-K", "constant:1"]) == 3


def test_sweep(tmp_path):
    a = write_cfg(tmp_path, "a.cfg", out="A")
    b = write_cfg(tmp_path, "b.cfg", out="B", extra="flow.t_max = 0.05\n")
    assert main(["solve", "--sweep", "--jobs", "2", str(a), str(b)]) == 2
    assert (tmp_path / "A" / "report.json").exists() and (tmp_path / "B" / "report.json").exists()
    c = write_cfg(tmp_path, "c.cfg", out="A")
    assert main(["solve", "--sweep", str(a), str(c)]) == 1
    assert main(["solve", str(a), str(b)]) == 1


def test_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CONICFLOW_THREADS", "1")
    assert main(["solve", str(write_cfg(tmp_path))]) == 0
    monkeypatch.setenv("CONICFLOW_THREADS", "many")
    assert main(["solve", str(write_cfg(tmp_path))]) == 1


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "conicflow.cli", "gen", "flat_torus", "n=3",
                          str(tmp_path / "t.mesh")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "t.mesh").read_text().startswith("conical-mesh 1")
