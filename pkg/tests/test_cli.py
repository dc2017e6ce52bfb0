import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from secjscc.cli import main

DEMO = Path(__file__).resolve().parent.parent / "demo"


@pytest.fixture
def demo(tmp_path):
    dst = tmp_path / "demo"
    shutil.copytree(DEMO, dst)
    return dst


def run(*args):
    return main([str(a) for a in args])


def test_rdpf_single_point(demo, tmp_path, capsys):
    assert run("rdpf", demo / "bernoulli.json", "--D", "0.1") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["solution"]["status"] == "Converged"
    assert doc["manifest"]["schema"] == 1


def test_rdpf_curve_rows(demo, tmp_path):
    out = tmp_path / "curve.csv"
    assert run("rdpf", demo / "bernoulli.json", "--curve", "D=0.05:0.45:0.05", "--csv", out, "--quiet") == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0].startswith("D_1") and len(lines) == 10


def test_outputs_are_reproducible_and_inputs_untouched(demo, tmp_path):
    before = {p.name: p.read_bytes() for p in demo.iterdir()}
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag / "sim.json"
        assert run("simulate", demo / "simulate_pair.json", "--trials", "20", "--k", "4", "--n", "12",
                   "--out", out, "--per-trial", tmp_path / tag / "trials.csv") == 0
        outs.append(out)
    a, b = (json.loads(o.read_text()) for o in outs)
    a["manifest"]["argv"] = b["manifest"]["argv"] = None
    a["manifest"]["config"] = b["manifest"]["config"] = None
    assert a == b
    assert (tmp_path / "a" / "trials.csv").read_bytes() == (tmp_path / "b" / "trials.csv").read_bytes()
    side = json.loads((tmp_path / "a" / "sim.json.manifest.json").read_text())
    assert {"started", "finished", "inputs", "version", "seed"} <= set(side)
    assert {p.name: p.read_bytes() for p in demo.iterdir()} == before


def test_same_command_byte_identical(demo, tmp_path):
    out = tmp_path / "r.json"
    args = ("region", demo / "pair_source.json", demo / "bec_pair.json", demo / "tuple_pair.json",
            "--out", out)
    assert run(*args) in (0, 3)
    first = out.read_bytes()
    run(*args)
    assert out.read_bytes() == first


def test_region_sweep_csv(demo, tmp_path):
    csv_path = tmp_path / "sweep.csv"
    code = run("region", demo / "pair_source.json", demo / "bec_pair.json", demo / "tuple_pair.json",
               "--aux", demo / "aux_pair.json", "--side", "both", "--sweep", "delta", "1,2=0:2:0.5",
               "--csv", csv_path, "--quiet")
    assert code == 0
    rows = csv_path.read_text().strip().split("\n")
    assert len(rows) == 1 + 5 * 2


def test_missing_aux_is_input_error(demo, capsys):
    code = run("region", demo / "pair_source.json", demo / "bec_pair.json", demo / "tuple_pair.json",
               "--side", "achievable")
    assert code == 1
    assert "--aux" in capsys.readouterr().err


def test_malformed_json_names_location(demo, capsys):
    bad = demo / "bad.json"
    bad.write_text('{"m": 1,,}')
    assert run("rdpf", bad) == 1
    assert "line 1" in capsys.readouterr().err


def test_missing_field_named(demo, capsys):
    data = json.loads((demo / "bernoulli.json").read_text())
    del data["joint"]
    (demo / "nojoint.json").write_text(json.dumps(data))
    assert run("rdpf", demo / "nojoint.json") == 1
    assert "joint" in capsys.readouterr().err


def test_infeasible_exit_code(demo):
    data = json.loads((demo / "bernoulli.json").read_text())
    data["distortion"]["1"]["matrix"] = [[0.5, 1.5], [1.5, 0.5]]
    (demo / "hard.json").write_text(json.dumps(data))
    assert run("rdpf", demo / "hard.json", "--D", "0.2", "--quiet") == 2


def test_iteration_limit_exit_code(demo):
    assert run("capacity", demo / "bsc_pair.json", "--tol", "0", "--quiet") == 3


def test_resource_cap_exit_code(demo):
    env = dict(os.environ, SECJSCC_MAX_ENTRIES="3")
    proc = subprocess.run([sys.executable, "-m", "secjscc", "rdpf", str(demo / "pair_source.json")],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 4
    assert "SECJSCC_MAX_ENTRIES" in proc.stderr


def test_lattice_command(capsys):
    assert run("lattice", "3") == 0
    doc = json.loads(capsys.readouterr().out)
    assert [o["subset"] for o in doc["order"]][-1] == "1,2,3"


def test_secrecy_with_oracle(demo, capsys):
    assert run("secrecy", demo / "bsc_pair.json", "--oracle", "100") == 0
    doc = json.loads(capsys.readouterr().out)
    assert abs(doc["value"] - 0.2529) < 1e-3
    assert doc["oracle_gap"] <= 5e-3


def test_bad_arguments_exit_one():
    assert run("rdpf") == 1
    assert run("nosuchcommand") == 1
