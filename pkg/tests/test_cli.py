import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from mdelab.cli import (EXIT_CRITERIA, EXIT_INVALID, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main,
                        write_csv, write_json)


def _cfg(tmp_path, name="cfg.json", **kw):
    p = tmp_path / name
    p.write_text(json.dumps(kw), encoding="utf-8")
    return str(p)


def _run(tmp_path, command, cfg, *extra, out="out"):
    return main([command, "--config", cfg, "--out", str(tmp_path / out), *extra])


def _manifest(tmp_path, out="out"):
    return json.loads((tmp_path / out / "manifest.json").read_text())


def test_solve_wigner(tmp_path):
    cfg = _cfg(tmp_path, data={"N": 8}, zetas=[{"re": 0, "im": 1}])
    assert _run(tmp_path, "solve", cfg) == EXIT_OK
    res = json.loads((tmp_path / "out" / "solve.json").read_text())
    sol = res["solutions"][0]
    m = np.array(sol["m_diag"])
    assert np.allclose(m[:, 0], 0, atol=1e-12) and np.allclose(m[:, 1], 0.6180339887498949, atol=1e-11)
    assert sol["residual"] <= 1e-11
    man = _manifest(tmp_path)
    assert man["status"] == 0 and set(man["artifacts"]) == {"solve.json"} and man["command"] == "solve"


def test_usage_errors(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    assert main(["frobnicate", "--config", cfg]) == EXIT_USAGE
    assert main(["solve"]) == EXIT_USAGE
    assert main(["solve", "--config", cfg, "--only", "AC1"]) == EXIT_USAGE
    assert main(["verify", "--config", cfg, "--only", "AC99"]) == EXIT_USAGE
    assert main(["solve", "--config", cfg, "--threads", "0"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exit_2(tmp_path, capsys):
    cfg = _cfg(tmp_path, eta=-1.0)
    assert _run(tmp_path, "dos", cfg) == EXIT_INVALID
    assert "eta" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{oops", encoding="utf-8")
    assert _run(tmp_path, "solve", str(bad)) == EXIT_INVALID
    assert _run(tmp_path, "solve", str(tmp_path / "missing.json")) == EXIT_INVALID
    prof = _cfg(tmp_path, "p.json", data={"N": 4, "kernel": {"kind": "variance_profile", "profile": [[1.0]]}})
    assert _run(tmp_path, "solve", prof) == EXIT_INVALID


def test_unwritable_output_exit_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = _cfg(tmp_path)
    assert main(["solve", "--config", cfg, "--out", str(blocker / "sub")]) == EXIT_IO


def test_numerical_failure_recorded(tmp_path):
    cfg = _cfg(tmp_path, data={"N": 4}, zetas=[{"re": 0.1, "im": 0.01}], solver={"max_iter": 1, "method": "dense"})
    assert _run(tmp_path, "solve", cfg) == EXIT_NUMERICAL
    man = _manifest(tmp_path)
    assert man["status"] == EXIT_NUMERICAL and man["failure"]["zeta"] == [0.1, 0.01]


def test_dos_csv_schema_and_determinism(tmp_path):
    cfg = _cfg(tmp_path, data={"N": 6}, tau={"start": -2.5, "stop": 2.5, "num": 21})
    assert _run(tmp_path, "dos", cfg, out="a") == EXIT_OK
    assert _run(tmp_path, "dos", cfg, out="b") == EXIT_OK
    a, b = (tmp_path / d / "dos.csv" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().startswith(b"tau,eta,rho,rho_extrapolated,converged\r\n")
    ma, mb = _manifest(tmp_path, "a"), _manifest(tmp_path, "b")
    assert ma["artifacts"] == mb["artifacts"] and ma["config_sha256"] == mb["config_sha256"]
    sup = json.loads((tmp_path / "a" / "support.json").read_text())
    assert sup["kappa"] == pytest.approx(2.0) and sup["contained"]


def test_stability_command(tmp_path):
    cfg = _cfg(tmp_path, data={"N": 6}, zetas=[{"re": 0, "im": 1}])
    assert _run(tmp_path, "stability", cfg) == EXIT_OK
    pt = json.loads((tmp_path / "out" / "stability.json").read_text())["points"][0]
    assert pt["sp_radius"] == pytest.approx((3 - np.sqrt(5)) / 2)
    assert {"gap_predicted", "gap_observed", "stability_norm", "polar_residual", "identity_residual"} <= set(pt)


def test_locallaw_rigidity_gaps_deterministic(tmp_path):
    base = dict(data={"N": 64}, trials=3, seed=5, Ns=[32, 64], window=[-1.0, 1.0], delta=0.1,
                tau={"start": -2.3, "stop": 2.3, "num": 231})
    cfg = _cfg(tmp_path, **base)
    for cmd, csv_name, header in (("locallaw", "locallaw.csv",
                                   "N,re_zeta,im_zeta,trial,lambda_max,trace_err,d_max,ward_resid"),
                                  ("rigidity", "rigidity.csv", "trial,tau,index,deviation"),
                                  ("gaps", "gaps.csv", "trial,index,gap,unfolded_gap")):
        assert _run(tmp_path, cmd, cfg, out=cmd + "1") == EXIT_OK
        assert _run(tmp_path, cmd, cfg, "--threads", "2", out=cmd + "2") == EXIT_OK
        one, two = (tmp_path / (cmd + k) / csv_name for k in "12")
        assert one.read_bytes() == two.read_bytes()
        assert one.read_text().splitlines()[0] == header
        assert _manifest(tmp_path, cmd + "1")["artifacts"] == _manifest(tmp_path, cmd + "2")["artifacts"]


def test_seed_override_changes_draws(tmp_path):
    cfg = _cfg(tmp_path, data={"N": 32}, trials=2, Ns=[32])
    main(["locallaw", "--config", cfg, "--out", str(tmp_path / "s1"), "--seed", "1"])
    main(["locallaw", "--config", cfg, "--out", str(tmp_path / "s2"), "--seed", "2"])
    assert (tmp_path / "s1" / "locallaw.csv").read_bytes() != (tmp_path / "s2" / "locallaw.csv").read_bytes()
    assert _manifest(tmp_path, "s1")["config"]["seed"] == 1


def test_threads_env_fallback(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)
    monkeypatch.setenv("MDELAB_THREADS", "nope")
    assert _run(tmp_path, "solve", cfg) == EXIT_USAGE
    monkeypatch.setenv("MDELAB_THREADS", "2")
    assert _run(tmp_path, "solve", cfg) == EXIT_OK


def test_verify_only_quick(tmp_path):
    cfg = _cfg(tmp_path, verify={"scale": "quick"})
    status = _run(tmp_path, "verify", cfg, "--only", "AC7")
    board = json.loads((tmp_path / "out" / "scoreboard.json").read_text())
    assert list(board["criteria"]) == ["AC7"] and board["scale"] == "quick"
    assert status == (EXIT_OK if board["all_passed"] else EXIT_CRITERIA)
    assert board["criteria"]["AC7"]["passed"]


def test_writers_are_byte_stable(tmp_path):
    write_csv(tmp_path / "x.csv", ("a", "b"), [(0.1, 1), (1 / 3, 2)])
    assert (tmp_path / "x.csv").read_bytes() == b"a,b\r\n0.10000000000000001,1\r\n0.33333333333333331,2\r\n"
    write_json(tmp_path / "x.json", {"b": float("nan"), "a": 1j})
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": [0.0, 1.0], "b": "nan"}


@pytest.mark.skipif(shutil.which("mdelab") is None, reason="console script not installed")
def test_console_script(tmp_path):
    cfg = _cfg(tmp_path, data={"N": 4})
    r = subprocess.run(["mdelab", "solve", "--config", cfg, "--out", str(tmp_path / "o")],
                       capture_output=True, text=True, env={**os.environ})
    assert r.returncode == 0 and (tmp_path / "o" / "solve.json").exists()
    r = subprocess.run([sys.executable, "-m", "mdelab.cli", "bogus", "--config", cfg], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE
