import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from pe_rhc.cli import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    SUMMARY_SCHEMA,
    ConfigError,
    build,
    csv_header,
    main,
    load_config,
    read_csv,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SCALAR = {"A": [[0.8]], "B": [[1.0]], "eps_c": 0.001, "S": 2.0}


def _write(tmp_path, **overrides):
    cfg = {
        "system": SCALAR,
        "cost": {"family": "quadratic", "Q": [[1.0]], "R": [[1.0]]},
        "terminal": {"box_radius": 0.1},
        "constraint": {"box": [-0.05, 0.05]},
        "controller": "online-rhc",
        "T": [64],
        "seeds": [0],
        "x1": [1.0],
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_csv_header():
    assert csv_header(1, 1) == "t,interval,x0,y0,xbar0,uhat0,du0,u0,cost,violation"
    assert csv_header(2, 1).split(",")[2:4] == ["x0", "x1"]


def test_run_rows_and_summary(tmp_path):
    path = _write(tmp_path, T=[64, 128, 256], seeds=[0, 1])
    out = tmp_path / "out"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    jsonschema.validate(summary, json.loads(SUMMARY_SCHEMA))
    assert summary["slope_regret"] is not None
    assert len(summary["runs"]) == 6
    for rec in summary["runs"]:
        steps, ivs = read_csv(out / rec["file"])
        lines = (out / rec["file"]).read_text().splitlines()
        assert len(lines) == rec["T"] + rec["intervals"] + 1
        assert len(steps) == rec["T"]
        assert all(r[-1] in ("true", "false") for r in ivs)
        assert rec["total_cost"] == pytest.approx(steps[:, -2].sum())
        assert rec["regret"] == pytest.approx(rec["total_cost"] - rec["hindsight_cost"])


def test_run_byte_identical(tmp_path):
    path = _write(tmp_path, T=[96])
    main(["run", "--config", str(path), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(path), "--out", str(tmp_path / "b"), "--workers", "2"])
    assert (tmp_path / "a" / "run_96_0.csv").read_bytes() == (tmp_path / "b" / "run_96_0.csv").read_bytes()


def test_parallel_matches_serial(tmp_path):
    path = _write(tmp_path, T=[64], seeds=[0, 1, 2])
    main(["run", "--config", str(path), "--out", str(tmp_path / "s"), "--workers", "1"])
    main(["run", "--config", str(path), "--out", str(tmp_path / "p"), "--workers", "3"])
    for s in (0, 1, 2):
        name = f"run_64_{s}.csv"
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


def test_oracle_zero_state(tmp_path):
    path = _write(tmp_path, x1=[0.0], controller="oracle")
    out = tmp_path / "o"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["runs"][0]["total_cost"] == 0.0


def test_other_controllers(tmp_path):
    path = _write(tmp_path, T=[300], constraint={"box": [-1.0, 1.0]}, system=dict(SCALAR, eps_c=0.01))
    for ctrl in ("etc", "hindsight"):
        out = tmp_path / ctrl
        assert main(["run", "--config", str(path), "--out", str(out), "--controller", ctrl]) == EXIT_OK
        assert (out / "run_300_0.csv").exists()


def test_seed_override(tmp_path):
    path = _write(tmp_path, seeds=[0, 1])
    out = tmp_path / "seed"
    main(["run", "--config", str(path), "--out", str(out), "--seed", "5"])
    assert sorted(p.name for p in out.glob("*.csv")) == ["run_64_5.csv"]


def test_env_workers(tmp_path, monkeypatch):
    monkeypatch.setenv("PE_RHC_WORKERS", "2")
    path = _write(tmp_path, seeds=[0, 1])
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "env")]) == EXIT_OK


def test_unknown_key_rejected(tmp_path, capsys):
    path = _write(tmp_path, horizon=3)
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    assert "unknown config keys" in capsys.readouterr().err


def test_config_errors(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    path = _write(tmp_path, cost={"family": "cubic"})
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    path = _write(tmp_path, T=[])
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        build({"system": SCALAR, "cost": {"family": "power", "a": 1.0, "c": 1}, "constraint": {"box": [-1, 1]}, "T": 8})


def test_empty_constraint_runtime_error(tmp_path, capsys):
    path = _write(tmp_path, constraint={"box": [1.0, -1.0]})
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "e")]) == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "step 1" in err and "empty" in err


def test_check_desk_config(tmp_path, capsys):
    code = main(["check", "--config", str(CONFIGS / "desk.json"), "--out", str(tmp_path / "desk")])
    out = capsys.readouterr().out
    assert code == EXIT_OK, out
    assert out.count("PASS") == 5


def test_check_fails_with_large_gamma(tmp_path, capsys):
    sysfile = json.loads((CONFIGS / "planar_system.json").read_text())
    cfg = json.loads((CONFIGS / "desk.json").read_text())
    cfg.update(system=sysfile, gamma=10.0 / 3.0, seeds=[0], T=[256])
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert main(["check", "--config", str(path), "--out", str(tmp_path / "bad")]) == EXIT_CHECK
    assert "persistence of excitation  FAIL" in capsys.readouterr().out


def test_shipped_configs_build():
    for name in ("desk.json", "scalar_sweep.json"):
        b = build(load_config(CONFIGS / name))
        assert b["runs"]
        assert np.isfinite(b["U"].radius)
