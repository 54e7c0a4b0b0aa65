import json

import pytest

from vmtune import cli
from vmtune import closedloop as cl
from vmtune import experiments as ex


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_oracle_writes_gain_and_manifest(tmp_path, capsys):
    assert cli.main(["oracle", "--k", "237.68", "--b", "50", "--out", str(tmp_path)]) == 0
    assert "gain 5.550899" in capsys.readouterr().out
    out = json.loads((tmp_path / "oracle.json").read_text())
    assert out["gain"] == pytest.approx(5.550899, abs=1e-6)
    m = _manifest(tmp_path)
    assert m["command"] == "oracle" and sorted(m["outputs"]) == ["gain_curve.csv", "oracle.json"]
    for key in ("config_hash", "version", "started", "finished", "seed", "dt", "T"):
        assert key in m


def test_oracle_rejects_nonpositive_gains(capsys):
    assert cli.main(["oracle", "--k", "-1"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_preset_dump_round_trips(tmp_path):
    path = tmp_path / "reach.json"
    assert cli.main(["preset", "dump", "reach", "--out", str(path)]) == 0
    doc = json.loads(path.read_text())
    assert doc["dt"] == 1e-3 and len(doc["theta0"]) == 2
    back = cl.system_from_dict(doc)
    assert cl.system_to_dict(back) == cl.system_to_dict(ex.build_reach().system)


def test_simulate_zero_scenario(tmp_path, capsys):
    assert cli.main(["simulate", "--system", "cart", "--scenario", "zero", "--T", "1", "--out", str(tmp_path)]) == 0
    loss = json.loads((tmp_path / "loss.json").read_text())
    assert loss["loss"] == 0.0 and loss["T"] == 1.0
    header = (tmp_path / "trajectory.csv").read_text().splitlines()[0]
    assert header.startswith("t,q_r1,qd_r1")
    assert _manifest(tmp_path)["T"] == 1.0


def test_simulate_from_system_file(tmp_path, capsys):
    path = tmp_path / "cart.json"
    cli.main(["preset", "dump", "cart", "--out", str(path)])
    assert cli.main(["simulate", "--system", str(path), "--scenario", "12", "--theta", "237.68,50", "--T", "2"]) == 0
    assert "grid-12" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["simulate", "--system", "cart", "--scenario", "401"],
    ["simulate", "--system", "cart", "--theta", "1,2,3"],
    ["simulate", "--system", "cart", "--theta", "a,b"],
    ["tune", "--preset", "reach", "--n-scenarios", "5"],
])
def test_bad_arguments_exit_with_config_code(argv):
    assert cli.main(argv) == 2


def test_bad_json_reports_its_position(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"robot": [1,\n  }')
    assert cli.main(["simulate", "--system", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_blow_up_exits_with_numeric_code(capsys):
    argv = ["simulate", "--system", "cart", "--scenario", "1", "--theta", "1e6,1", "--dt", "0.05"]
    assert cli.main(argv) == 3
    assert "numeric failure" in capsys.readouterr().err


def test_seed_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("VMTUNE_SEED", "5")
    argv = ["tune", "--preset", "cart", "--n-scenarios", "2", "--iters", "1", "--jobs", "1", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    assert _manifest(tmp_path)["seed"] == 5
    res = json.loads((tmp_path / "result.json").read_text())
    assert res["scenario_set"]["provenance"]["seed"] == 5 and len(res["cost_history"]) == 1
    assert "true gain" in capsys.readouterr().out
    monkeypatch.setenv("VMTUNE_SEED", "x")
    assert cli.main(argv) == 2
