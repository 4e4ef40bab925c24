import json

import pytest

from serverless_ledger.cli import main

SMALL = """name = "tiny"
seed = 2
[chain]
nodes = 4
[workload]
rate = 40
duration = 1
"""


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(SMALL)
    return p


def test_run_writes_artifacts(scenario, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(scenario), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["committed"] == 40 and report["seed"] == 2
    assert (out / "ledger.bin").exists()
    assert main(["run", str(scenario), "--seed", "5", "--out", str(tmp_path / "r5")]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 5


def test_audit_exit_codes(scenario, tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", str(scenario), "--out", str(out)])
    capsys.readouterr()
    ledger = out / "ledger.bin"
    assert main(["audit", str(ledger)]) == 0
    assert capsys.readouterr().out.splitlines()[0].endswith("|chain_verify|ok")
    data = bytearray(ledger.read_bytes())
    data[len(data) // 2] ^= 0x10
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(data))
    assert main(["audit", str(bad)]) == 2
    assert "|chain_verify|FAIL" in capsys.readouterr().out
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    assert main(["audit", str(empty)]) == 1
    assert main(["audit", str(tmp_path / "missing.bin")]) == 1


def test_costsweep(scenario, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["costsweep", str(scenario), "--grid", "10,50,100", "--out", str(out)]) == 0
    lines = (out / "cost_curve.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("10,")
    check = (out / "cost_crosscheck.csv").read_text().splitlines()
    assert len(check) == 4
    assert all(float(row.split(",")[-1]) < 0.10 for row in check[1:])


@pytest.mark.parametrize("argv", [
    [],
    ["explode"],
    ["costsweep", "scenarios/baseline.toml"],
    ["costsweep", "scenarios/baseline.toml", "--grid", "5:1:1"],
    ["run", "no/such/file.toml"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
