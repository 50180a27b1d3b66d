import json
import subprocess
import sys

import numpy as np
import pytest

from spde_ldp.cli import DEFAULTS, load_config, run
from spde_ldp.errors import ValidationError
from spde_ldp.grid_noise import GridSpec, load_field

SMALL = ["--set", "grid.nx=15", "--set", "grid.nt=40"]


def read_manifest(out):
    return [json.loads(line) for line in (out / "manifest.jsonl").read_text().splitlines()]


def test_defaults_and_overrides(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text('[grid]\nnx = 31\n[model]\npreset = "burgers"\n')
    cfg = load_config(cfg_file, ["grid.nt=12", "ldp.epsilons=[0.5, 0.1]", "initial.profile=sin"])
    assert cfg["grid"] == {"nx": 31, "nt": 12, "T": 1.0}
    assert cfg["model"]["preset"] == "burgers"
    assert cfg["ldp"]["epsilons"] == [0.5, 0.1]
    assert cfg["initial"]["profile"] == "sin"
    assert cfg["solve"] == DEFAULTS["solve"]


@pytest.mark.parametrize("override", ["grid.foo=1", "nosuch.key=1", "grid.nx=1.5", "gridnx=3",
                                      "model.preset=3"])
def test_bad_overrides_are_rejected(override):
    with pytest.raises(ValidationError):
        load_config(None, [override])


def test_unknown_key_in_file_exits_1_without_outputs(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text("[grid]\nnx = 15\nspacing = 2\n")
    out = tmp_path / "out"
    assert run(["simulate", "--config", str(cfg_file), "--out", str(out)]) == 1
    assert not out.exists()


def test_mismatched_initial_condition_exits_1(tmp_path):
    out = tmp_path / "o"
    assert run(["simulate", "--out", str(out), *SMALL, "--set", "initial.values=[1.0, 2.0]"]) == 1
    assert sorted(p.name for p in out.iterdir()) == ["manifest.jsonl"]
    recs = read_manifest(out)
    assert [r["record"] for r in recs] == ["start", "finish"] and recs[1]["exit_code"] == 1


def test_blowup_exits_2(tmp_path):
    out = tmp_path / "o"
    code = run(["simulate", "--out", str(out), "--set", "model.preset=burgers", "--set", "initial.profile=sin",
                "--set", "initial.amplitude=1e5", "--set", "grid.nx=15", "--set", "grid.nt=10"])
    assert code == 2
    assert not (out / "results.csv").exists()


def test_nonconvergence_exits_2(tmp_path):
    out = tmp_path / "o"
    code = run(["rate-min", "--out", str(out), *SMALL, "--set", "model.preset=burgers",
                "--set", "target.max_iter=2", "--set", "target.tolerance=1e-12"])
    assert code == 2
    assert (out / "results.csv").read_text().splitlines()[1].endswith("false")


def test_simulate_writes_manifest_then_trajectory(tmp_path):
    out = tmp_path / "o"
    assert run(["simulate", "--out", str(out), *SMALL, "--set", "initial.profile=sin", "--epsilon", "0.1",
                "--seed", "4"]) == 0
    start, finish = read_manifest(out)
    assert start["record"] == "start" and start["seed"] == 4 and start["preset"] == "linear_heat"
    assert start["grid"] == {"nx": 15, "nt": 40, "T": 1.0}
    assert len(start["config_sha256"]) == 64 and "timestamp" in start and "build" in start
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0] == "t,x,value" and len(lines) == 1 + 41 * 15
    assert "timestamp" not in (out / "results.csv").read_text()


def test_rate_min_saves_control(tmp_path):
    out = tmp_path / "o"
    assert run(["rate-min", "--out", str(out), *SMALL]) == 0
    grid, values, _ = load_field(out / "control.csv")
    assert grid == GridSpec(15, 40) and values.shape == (40, 15)
    value = float((out / "results.csv").read_text().splitlines()[1].split(",")[0])
    assert value == pytest.approx(0.5 * np.sum(values ** 2) * grid.dx * grid.dt, rel=1e-12)


def test_skeleton_accepts_saved_control(tmp_path):
    a = tmp_path / "a"
    assert run(["rate-min", "--out", str(a), *SMALL]) == 0
    b = tmp_path / "b"
    assert run(["skeleton", "--out", str(b), *SMALL, "--set", f"control.path='{a / 'control.csv'}'"]) == 0
    last = np.array([float(r.split(",")[2]) for r in (b / "results.csv").read_text().splitlines()[-15:]])
    proj = np.dot(last, np.sqrt(2) * np.sin(np.pi * GridSpec(15, 40).x)) / 16
    assert proj == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("sub,extra", [
    ("mc", ["-n", "300", "--set", "mc.method=tilted"]),
    ("a2", ["--set", "a2.n_seeds=3", "--set", "control.profile=sin"]),
    ("ldp", ["-n", "200", "--set", "ldp.epsilons=[0.2, 0.05]"]),
])
def test_reruns_are_byte_identical(tmp_path, sub, extra):
    texts = []
    for k, threads in enumerate((1, 2)):
        out = tmp_path / f"r{k}"
        assert run([sub, "--out", str(out), "--seed", "7", "--threads", str(threads), *SMALL, *extra]) == 0
        texts.append((out / "results.csv").read_bytes())
    assert texts[0] == texts[1]


def test_kernel_check_passes(tmp_path):
    out = tmp_path / "k"
    assert run(["kernel-check", "--out", str(out)]) == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert rows[0] == "estimate_id,fitted_K,fitted_exponent,max_ratio,pass"
    assert all(r.endswith("true") for r in rows[1:]) and len(rows) == 7


def test_module_entry_point(tmp_path):
    out = tmp_path / "m"
    proc = subprocess.run([sys.executable, "-m", "spde_ldp", "a1", "--out", str(out), *SMALL,
                           "--set", "control.profile=sin"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    rows = (out / "results.csv").read_text().splitlines()
    assert rows[0] == "n,distance" and len(rows) == 6
