import hashlib
import json
import math
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from qbayes import config
from qbayes.cli import main
from qbayes.particles import read_cloud

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def digest(folder: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir()) if p.is_file()}


def write_toml(path: Path, text: str) -> str:
    path.write_text(text)
    return str(path)


COIN = """
version = 1
seed = 2
truth = [0.37]

[model]
name = "coin"

[controls]
n = {n}

[sampler]
kind = "{kind}"
n_particles = 5000
propagation = "markov"
tempering_steps = 10
"""


def test_gen_data_rows_and_seed_stability(tmp_path):
    cfg = write_toml(tmp_path / "c.toml", COIN.format(n=40, kind="sir"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "gen-data", "--config", cfg, "--seed", "5") == 0
    assert run(b, "gen-data", "--config", cfg, "--seed", "5") == 0
    lines = (a / "dataset.csv").read_text().splitlines()
    assert lines[0] == "outcome,control_kind,t,m,offset" and len(lines) == 41
    assert digest(a) == digest(b)
    c = tmp_path / "c"
    run(c, "gen-data", "--config", cfg, "--seed", "6")
    assert digest(c) != digest(a)


def test_missing_truth_is_config_error(tmp_path, capsys):
    text = COIN.format(n=10, kind="sir").replace("truth = [0.37]\n", "")
    cfg = write_toml(tmp_path / "c.toml", text)
    assert run(tmp_path, "gen-data", "--config", cfg) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and "truth" in err["message"]


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_toml(tmp_path / "c.toml", COIN.format(n=10, kind="sir") + "\n[extra]\nx = 1\n")
    assert run(tmp_path, "gen-data", "--config", cfg) == 2
    assert "extra" in json.loads(capsys.readouterr().err)["message"]


def test_json_config_equivalent(tmp_path):
    doc = config.load(CONFIGS / "coin.toml")
    jpath = tmp_path / "coin.json"
    jpath.write_text(json.dumps(doc))
    a, b = tmp_path / "a", tmp_path / "b"
    run(a, "gen-data", "--config", str(CONFIGS / "coin.toml"))
    run(b, "gen-data", "--config", str(jpath))
    assert digest(a) == digest(b)


def test_infer_conjugate_coin(tmp_path):
    cfg = write_toml(tmp_path / "c.toml", COIN.format(n=100, kind="sir"))
    run(tmp_path, "gen-data", "--config", cfg)
    data = (tmp_path / "dataset.csv").read_text().splitlines()[1:]
    s = sum(int(line.split(",")[0]) for line in data)
    assert run(tmp_path, "infer", "--config", cfg, "--dataset", str(tmp_path / "dataset.csv")) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    post = stats.beta(1 + s, 1 + 100 - s)
    assert abs(rep["mean"][0] - post.mean()) < 0.02
    assert rep["sd"][0] ** 2 == pytest.approx(post.var(), rel=0.2)
    assert len(rep["ess_trace"]) == 100 and rep["completed"]
    cloud = read_cloud(tmp_path / "cloud.jsonl")
    assert cloud.size == 5000


def test_infer_empty_dataset_reports_prior(tmp_path):
    cfg = write_toml(tmp_path / "c.toml", COIN.format(n=10, kind="sir"))
    empty = tmp_path / "empty.csv"
    empty.write_text("outcome,control_kind,t,m,offset\n")
    assert run(tmp_path, "infer", "--config", cfg, "--dataset", str(empty)) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["evidence"] == 1.0 and rep["n_data"] == 0
    assert rep["mean"][0] == pytest.approx(0.5, abs=0.02)


def test_infer_tle_and_sir_evidence_agree(tmp_path):
    ev = {}
    for kind in ("sir", "tle"):
        out = tmp_path / kind
        cfg = write_toml(tmp_path / f"{kind}.toml", COIN.format(n=30, kind=kind))
        run(out, "gen-data", "--config", cfg)
        assert run(out, "infer", "--config", cfg, "--dataset", str(out / "dataset.csv")) == 0
        ev[kind] = json.loads((out / "report.json").read_text())["log_evidence"]
    assert math.exp(ev["sir"] - ev["tle"]) == pytest.approx(1.0, abs=0.05)


def test_infer_missing_dataset_file(tmp_path):
    cfg = write_toml(tmp_path / "c.toml", COIN.format(n=10, kind="sir"))
    assert run(tmp_path, "infer", "--config", cfg, "--dataset", str(tmp_path / "nope.csv")) == 2


def test_infer_degenerate_exit_3_with_partial(tmp_path, capsys):
    text = """
version = 1
seed = 1
truth = [0.5]

[model]
name = "interval"
params = { a = 0.5, b = 0.5, width = 1.0 }

[controls]
n = 3

[sampler]
kind = "sir"
n_particles = 50
"""
    cfg = write_toml(tmp_path / "deg.toml", text)
    assert run(tmp_path, "infer", "--config", cfg) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 3 and len(err["partial"]) == 2
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["completed"] is False
    assert (tmp_path / "cloud.jsonl").exists()


def test_sample_gaussian6d_regime(tmp_path):
    assert run(tmp_path, "sample", "--config", str(CONFIGS / "gaussian6d_hmc.toml")) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["stats"]["acceptance_rate"] >= 0.95
    lines = (tmp_path / "samples.jsonl").read_text().splitlines()
    assert len(lines) == 1000 and "theta" in json.loads(lines[0])


def test_sample_zero_steps(tmp_path):
    text = '[mcmc]\ntarget = "rosenbrock"\nkernel = "rwm"\nsteps = 0\n'
    cfg = write_toml(tmp_path / "z.toml", text)
    assert run(tmp_path, "sample", "--config", cfg) == 0
    assert (tmp_path / "samples.jsonl").read_text() == ""
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["n_samples"] == 0 and rep["stats"]["proposals"] == 0


def test_sample_unknown_target(tmp_path):
    cfg = write_toml(tmp_path / "u.toml", '[mcmc]\ntarget = "banana"\nkernel = "rwm"\n')
    assert run(tmp_path, "sample", "--config", cfg) == 2


def test_sample_nuts_reports_trajectory_length(tmp_path):
    text = (CONFIGS / "rosenbrock_nuts.toml").read_text().replace("steps = 2000", "steps = 200")
    cfg = write_toml(tmp_path / "r.toml", text)
    assert run(tmp_path, "sample", "--config", cfg) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert 0 < rep["log2_mean_trajectory_length"] <= 10


def test_design_command(tmp_path):
    assert run(tmp_path, "design", "--config", str(CONFIGS / "ramsey_design.toml")) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["controls"]) == 15 and rep["truth"] == [1.83]
    assert rep["elapsed_time"] == sorted(rep["elapsed_time"])
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,median_sd,q25,q75" and len(trace) == 16


def test_bench_threads_do_not_change_bytes(tmp_path):
    cfg = str(CONFIGS / "t2_study.toml")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "bench", "--config", cfg, "--threads", "1") == 0
    assert run(b, "bench", "--config", cfg, "--threads", "2") == 0
    assert digest(a) == digest(b)
    assert (a / "trace_sir.csv").exists()


def test_bad_threads(tmp_path):
    assert run(tmp_path, "bench", "--config", str(CONFIGS / "t2_study.toml"), "--threads", "0") == 2


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("qbayes")
    cmd = [exe] if exe else [sys.executable, "-m", "qbayes.cli"]
    proc = subprocess.run(cmd + ["gen-data", "--config", str(CONFIGS / "coin.toml"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert np.loadtxt(tmp_path / "dataset.csv", delimiter=",", skiprows=1, usecols=0).size == 100
