import json
import os

import numpy as np
import pytest

from branchflow import cli, io
from branchflow.core import GridSpec, SolverError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DIPOLE_CFG = os.path.join(ROOT, "configs", "dipole.cfg")
SMALL = ["--set", "n=32", "--set", "steps_per_eps=20", "--set", "eps=[0.2, 0.1]"]


def run(tmp_path, *argv):
    return cli.main(["--out-dir", str(tmp_path)] + list(argv))


def test_profile(tmp_path):
    assert run(tmp_path, "profile", "--beta", "0.5714") == 0
    h, rows = io.read_csv(str(tmp_path / "profile.csv"))
    info = json.loads((tmp_path / "c0.json").read_text())
    assert info["config_hash"] == h
    assert info["c0"] == pytest.approx(1.9162885971364485, rel=1e-3)
    assert len(rows) > 100


def test_kernel(tmp_path):
    assert run(tmp_path, "kernel", "--beta", "0.5714", "--check-n", "256") == 0
    info = json.loads((tmp_path / "kernel_check.json").read_text())
    assert info["marginal_l1"] <= 1e-2 and info["mass"] == pytest.approx(1.0)


def test_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "--bogus") == 2
    assert run(tmp_path, "profile") == 2
    assert run(tmp_path, "frobnicate") == 2
    assert run(tmp_path, "render", "--field", str(tmp_path / "missing.bgrid"), "--out", "x.pgm") == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("unknown_key = 1\n")
    assert run(tmp_path, "minimize", "--config", str(cfg)) == 2
    assert run(tmp_path, "sweep", "--config", DIPOLE_CFG, "--set", "eps=[0.1, 0.2]") == 2
    assert "branchflow" in capsys.readouterr().err


def test_render_zero_field(tmp_path):
    path = io.write_bgrid(str(tmp_path / "z.bgrid"), GridSpec(8, 6, 1.0, 0.75).zeros_field(), "zz")
    assert run(tmp_path, "render", "--field", path, "--out", "z.pgm") == 0
    img = io.read_pgm(str(tmp_path / "z.pgm"))
    assert img.shape == (6, 8) and not img.any()
    assert io.pgm_comment(str(tmp_path / "z.pgm")) == "zz"


def test_oracle(tmp_path):
    inst = tmp_path / "i.csv"
    inst.write_text("x,y,mass\n0,0,1\n1,0,-1\n")
    assert run(tmp_path, "oracle", "--instance", str(inst)) == 0
    out = json.loads((tmp_path / "oracle.json").read_text())
    assert out["dalpha"] == pytest.approx(1.0)
    inst.write_text("0,0,1\n1,0,-0.5\n")
    assert run(tmp_path, "oracle", "--instance", str(inst)) == 2


def test_bounds(tmp_path):
    suite = os.path.join(ROOT, "configs", "suite")
    assert run(tmp_path, "bounds", "--suite", suite) == 0
    h, rows = io.read_csv(str(tmp_path / "bounds.csv"))
    info = json.loads((tmp_path / "bounds.json").read_text())
    assert len(rows) == 20 and info["passed"] and info["config_hash"] == h
    assert run(tmp_path, "bounds", "--suite", str(tmp_path / "nothing")) == 2


def test_dyadic(tmp_path):
    x = (np.arange(16) + 0.5) / 16
    d = np.exp(-((x[:, None] - 0.4) ** 2 + (x[None, :] - 0.6) ** 2) / 0.02)
    np.savetxt(tmp_path / "d.txt", d)
    assert run(tmp_path, "dyadic", "--density", str(tmp_path / "d.txt"), "--eps", "0.05", "--alpha", "0.75") == 0
    h, rows = io.read_csv(str(tmp_path / "certificate.csv"))
    assert float(rows[0]["div_resid"]) <= 1e-10 * d.max()
    assert json.loads((tmp_path / "tree.json").read_text())["config_hash"] == h
    assert io.bgrid_hash(str(tmp_path / "field.bgrid")) == h


def test_sweep_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(d, "sweep", "--config", DIPOLE_CFG, *SMALL, "--snapshots") == 0
    assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    assert (a / "final.bgrid").read_bytes() == (b / "final.bgrid").read_bytes()
    assert (a / "stage_01.bgrid").exists()
    h, rows = io.read_csv(str(a / "sweep.csv"))
    assert [float(r["eps"]) for r in rows] == [0.2, 0.1]
    assert h == json.loads((a / "summary.json").read_text())["config_hash"]
    # overrides change the hash
    assert run(tmp_path / "c", "sweep", "--config", DIPOLE_CFG, *SMALL, "--set", "penalty=2.0") == 0
    assert io.read_csv(str(tmp_path / "c" / "sweep.csv"))[0] != h


def test_minimize_density(tmp_path):
    x = (np.arange(32) + 0.5) / 32 * 3.0
    d = np.exp(-((x[:, None] - 1.0) ** 2 + (x[None, :] - 1.5) ** 2) / 0.05)
    d = d - d[::-1]
    np.save(tmp_path / "f.npy", d)
    cfg = tmp_path / "m.cfg"
    cfg.write_text('n = 32\nL = 3.0\neps = [0.1]\nsteps_per_eps = 10\ndensity = "f.npy"\n')
    assert run(tmp_path, "minimize", "--config", str(cfg)) == 0
    _, rows = io.read_csv(str(tmp_path / "sweep.csv"))
    assert float(rows[0]["div_resid"]) <= 1e-10


def test_solver_failure_exit_code(tmp_path, monkeypatch, capsys):
    import branchflow.optimize as opt

    def broken(u0, f, ep, eps, sched):
        err = SolverError("energy is not finite")
        err.stage_field = u0
        raise err

    monkeypatch.setattr(opt, "_stage", broken)
    assert run(tmp_path, "minimize", "--config", DIPOLE_CFG, *SMALL) == 1
    err = capsys.readouterr().err
    assert "stage dump" in err
    assert (tmp_path / "stage_dump.bgrid").exists()
