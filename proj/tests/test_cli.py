"""End-to-end checks of the command-line tool on a small world."""

import json
import os
import subprocess
from pathlib import Path

import pytest

CLI = os.environ.get("TRANSAGENT_CLI", str(Path(__file__).resolve().parents[1] / "build" / "transagent"))

SMALL = [
    "data.classes=6",
    "data.train_per_class=6",
    "data.test_per_class=10",
    "data.pretrain_classes=24",
    "data.shots=4",
    "train.epochs=2",
    "train.seeds=1,2",
]


def run(*args, root, extra=(), env=None, check=True):
    cmd = [CLI, *args, "--set", *SMALL, f"run.root={root}", *extra]
    proc = subprocess.run(cmd, capture_output=True, text=True, env=env)
    if check and proc.returncode != 0:
        raise AssertionError(f"{cmd} failed ({proc.returncode}): {proc.stderr}")
    return proc


def run_dir(root):
    dirs = [p for p in Path(root).iterdir() if p.is_dir()]
    assert len(dirs) == 1, dirs
    return dirs[0]


def test_extract_is_byte_identical(tmp_path):
    env = dict(os.environ, TRANSAGENT_CACHE_DIR=str(tmp_path / "cache"))
    run("extract", root=tmp_path / "a", env=env)
    first = {p.name: p.read_bytes() for p in (tmp_path / "cache").iterdir()}
    run("extract", root=tmp_path / "b", env=env)
    second = {p.name: p.read_bytes() for p in (tmp_path / "cache").iterdir()}
    assert len(first) == 2
    assert first == second


def test_full_pipeline_from_cache(tmp_path):
    run("extract", root=tmp_path)
    run("train", root=tmp_path, extra=["cache.use=true"])
    run("export", root=tmp_path)
    out = run("eval", root=tmp_path).stdout
    assert "Base" in out and "HM" in out
    d = run_dir(tmp_path)
    log = [json.loads(line) for line in (d / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 1, 2]
    assert {"ce", "vac", "lac", "mac", "total", "seconds"} <= set(log[0])
    report = json.loads((d / "report.jsonl").read_text().splitlines()[0])
    assert len(report["base_per_seed"]) == 2
    grid = run("gating-report", root=tmp_path).stdout
    assert grid.startswith("group,agent,mean_weight")
    assert (d / "gating-grid-seed1.csv").exists()
    # Every output lives under the run directory, next to the config that made it.
    stored = json.loads((d / "config.json").read_text())
    assert stored["data.classes"] == "6"


def test_zero_weights_match_the_agent_free_baseline(tmp_path):
    zero = ["loss.lambda1=0", "loss.lambda2=0", "loss.lambda3=0"]
    empty = tmp_path / "no_agents.json"
    empty.write_text('{"agents": []}')
    reports = []
    for name, extra in (("with", zero), ("without", zero + [f"agents.registry={empty}"])):
        root = tmp_path / name
        for cmd in ("train", "export", "eval"):
            run(cmd, root=root, extra=extra)
        reports.append((run_dir(root) / "report.jsonl").read_text())
    assert reports[0] == reports[1]


def test_ablate_fusion_has_three_rows(tmp_path):
    out = run("ablate", "--axis", "fusion", root=tmp_path, extra=["train.epochs=1", "train.seeds=1"]).stdout
    rows = [json.loads(line) for line in (run_dir(tmp_path) / "ablation-fusion.jsonl").read_text().splitlines()]
    assert [r["label"] for r in rows] == ["average", "add", "gating"]
    assert "gating" in out


def test_exit_codes(tmp_path):
    bad = run("train", root=tmp_path, extra=["loss.nonsense=1"], check=False)
    assert bad.returncode == 2
    err = json.loads(bad.stderr.strip().splitlines()[-1])
    assert err["error"] == "config"
    bad_axis = run("ablate", "--axis", "dropout", root=tmp_path, check=False)
    assert bad_axis.returncode == 2
    missing = run("eval", root=tmp_path, check=False)
    assert missing.returncode == 3
    assert json.loads(missing.stderr.strip().splitlines()[-1])["error"] == "missing_input"
    no_cache = run("train", root=tmp_path / "x", extra=["cache.use=true"], check=False)
    assert no_cache.returncode == 3


def test_help_lists_every_key():
    out = subprocess.run([CLI, "--help"], capture_output=True, text=True).stdout
    for key in ("data.classes", "loss.lambda2", "loss.fusion", "agents.pooling", "train.lr", "run.root"):
        assert key in out
    assert "25" in out
