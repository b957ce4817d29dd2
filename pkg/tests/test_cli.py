import json

import pytest

from faultmg.cli import main

CFG = """
[problem]
dim = 1
coarsest_cells = 4
[faults]
kind = componentwise
[sweep]
levels = 1
eps = 0, 0.1
iterations = 50
replications = 2
[bound]
xi = 0.1
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(CFG)
    return p


def test_hierarchy(cfg, capsys):
    assert main(["hierarchy", "--config", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["grids"][1]["n"] == 7


def test_lyapunov_out_and_seed(cfg, tmp_path, capsys):
    out = tmp_path / "rows.csv"
    assert main(["lyapunov", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    first = out.read_bytes()
    assert main(["lyapunov", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert out.read_bytes() == first
    assert first.startswith(b"levels,n,eps,config")
    assert len(first.splitlines()) == 3
    assert main(["lyapunov", "--config", str(cfg), "--seed", "4", "--workers", "1"]) == 0
    assert capsys.readouterr().out.encode() != first


def test_solve_levelset_bound(cfg, capsys):
    assert main(["solve", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("iter,residual\n0,")
    assert main(["bound", "--config", str(cfg)]) == 0
    assert "replica_bound" in json.loads(capsys.readouterr().out)
    assert main(["levelset", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("levels,n,config,eps_star")


def test_errors_are_json(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "missing.ini")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.ini"
    bad.write_text(CFG.replace("xi = 0.1", "xi = 0.1\nc_star = 0.2"))
    assert main(["bound", "--config", str(bad)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "HypothesisError" and "C_* * gamma > 1" in err["message"]


def test_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code != 0


def test_output_path_from_config(tmp_path):
    target = tmp_path / "from_config.json"
    p = tmp_path / "exp.ini"
    p.write_text(CFG.replace("replications = 2", f"replications = 2\noutput = {target}"))
    assert main(["hierarchy", "--config", str(p)]) == 0
    assert json.loads(target.read_text())["dim"] == 1


@pytest.mark.parametrize("name", ["sweep_2d.ini", "levelset_2d.ini", "bound_1d.ini"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    from faultmg.harness import read_config
    exp = read_config(Path(__file__).resolve().parents[1] / "configs" / name)
    for label in exp.variants:
        exp.cycle_config(exp.eps_axis[-1], label)
