import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from qkspace import cli
from qkspace import experiments as ex

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "task": {"d_head": 8, "r1": 2, "r2": 3, "T": 8},
    "train": {"max_batches": 60, "val_every": 20, "val_batches": 1, "val_batch_size": 128,
              "batch_size": 64, "lr": 3e-3},
    "estimation": {"n_triplets": 4000, "shard_size": 1500},
    "sweep": {"r1_values": [2], "r2_values": [2, 3], "max_batches": 40},
    "intervene": {"n_samples": 500},
    "attribute": {"n_prompts": 3},
    "pca": {"n_points": 50},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def test_print_default_config_roundtrips(capsys):
    assert run("print-default-config") == 0
    text = capsys.readouterr().out
    cfg = ex.config_from_dict(yaml.safe_load(text))
    assert cfg == ex.ExperimentConfig()
    assert cfg.train.batch_size == 256 and cfg.intervene.n_samples == 51_200


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "missing.yaml") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("task: {d_head: 8, colour: red}\n")
    assert run("train", "--config", bad) == 2
    bad.write_text("train: {lr: -1}\n")
    assert run("train", "--config", bad) == 2
    bad.write_text("task: {variant: quantum}\n")
    assert run("train", "--config", bad) == 2
    bad.write_text("task: [1, 2\n")
    assert run("train", "--config", bad) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_artifacts_exit_3(tmp_path, tiny_config):
    for cmd in ("decompose", "intervene", "attribute"):
        assert run(cmd, "--config", tiny_config, "--out", tmp_path / "nothing") == 3
    assert run("dump-decompose", "--config", tiny_config, "--dump", tmp_path / "none.jsonl") == 3


def test_numerical_failure_exit_4(tmp_path, tiny_config, monkeypatch):
    from qkspace.errors import TrainingError

    def boom(*a, **k):
        raise TrainingError("diverged", batch_index=5)

    monkeypatch.setattr(ex, "train", boom)
    assert run("train", "--config", tiny_config, "--out", tmp_path / "x") == 4


def _files(d: Path):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _pipeline(out: Path, cfg: Path):
    assert run("train", "--config", cfg, "--out", out, "--seed", 3) == 0
    for cmd in ("decompose", "intervene", "attribute"):
        assert run(cmd, "--config", cfg, "--out", out, "--seed", 3) == 0
    assert run("sweep", "--config", cfg, "--out", out / "sweep", "--seed", 3) == 0


def test_pipeline_outputs_and_determinism(tmp_path, tiny_config, capsys):
    a, b = tmp_path / "a" / "nested", tmp_path / "b"
    _pipeline(a, tiny_config)
    printed = capsys.readouterr().out
    assert "accuracy" in printed and "recovered ranks" in printed
    _pipeline(b, tiny_config)
    fa, fb = _files(a), _files(b)
    assert set(fa) == set(fb)
    for name in fa:
        assert fa[name] == fb[name], name
    for name in ("head.json", "train_report.csv", "ranks.json", "interaction_matrix.csv", "pca.csv",
                 "interventions.csv", "attribution.json", "delta_z1.json", "sweep/sweep.csv",
                 "manifest_train.json", "render_pca.py", "sweep/render_sweep.py"):
        assert name in fa
    # a different seed changes the checkpoint
    c = tmp_path / "c"
    assert run("train", "--config", tiny_config, "--out", c, "--seed", 4) == 0
    assert (c / "head.json").read_bytes() != fa["head.json"]


def test_outputs_content(tmp_path, tiny_config):
    out = tmp_path / "run"
    _pipeline(out, tiny_config)
    table = list(csv.DictReader(open(out / "interventions.csv")))
    assert [r["condition"] for r in table] == ["z1", "z2", "z1+z2", "rand_r1", "rand_r2", "rand_r1+r2"]
    for rec in json.loads((out / "attribution.json").read_text()):
        for i, total in enumerate(rec["total"]):
            parts = sum(v[i] for v in rec["features"].values()) + rec["residual"][i]
            assert abs(parts - total) <= 1e-10 * max(1.0, abs(total))
    sweep = list(csv.DictReader(open(out / "sweep" / "sweep.csv")))
    assert [(r["r1"], r["r2"]) for r in sweep] == [("2", "2"), ("2", "3")]
    assert {"r1", "r2", "recovered_r1", "recovered_r2", "accuracy", "superposition_score"} <= set(sweep[0])
    man = json.loads((out / "manifest_decompose.json").read_text())
    assert man["seed"] == 3 and "numpy" in man["versions"] and man["config"]["task"]["d_head"] == 8


def test_sweep_resume_skips_completed_cells(tmp_path, tiny_config, monkeypatch):
    out = tmp_path / "sw"
    assert run("sweep", "--config", tiny_config, "--out", out) == 0
    before = (out / "sweep.csv").read_bytes()
    calls = []
    real = ex.run_cell
    monkeypatch.setattr(ex, "run_cell", lambda c: calls.append(c) or real(c))
    assert run("sweep", "--config", tiny_config, "--out", out, "--resume") == 0
    assert calls == [] and (out / "sweep.csv").read_bytes() == before
    # a changed cell config is recomputed
    (out / "cells" / "dh8_discrete_s0_r2-3.json").unlink()
    assert run("sweep", "--config", tiny_config, "--out", out, "--resume") == 0
    assert len(calls) == 1 and (out / "sweep.csv").read_bytes() == before


def test_sweep_records_failed_cells(tmp_path, tiny_config, monkeypatch):
    real = ex.train

    def flaky(task, *a, **k):
        if task.r2 == 3:
            raise RuntimeError("cell exploded")
        return real(task, *a, **k)

    monkeypatch.setattr(ex, "train", flaky)
    rows = ex.run_sweep(ex.load_config(tiny_config), tmp_path / "sw")
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("error")


def test_sweep_worker_count_does_not_change_results(tmp_path, tiny_config):
    cfg = ex.load_config(tiny_config)
    ex.run_sweep(cfg, tmp_path / "one", workers=1)
    ex.run_sweep(cfg, tmp_path / "two", workers=2)
    assert (tmp_path / "one" / "sweep.csv").read_bytes() == (tmp_path / "two" / "sweep.csv").read_bytes()


def test_train_resume_reuses_checkpoint(tmp_path, tiny_config, monkeypatch):
    out = tmp_path / "t"
    assert run("train", "--config", tiny_config, "--out", out) == 0
    monkeypatch.setattr(ex, "train", lambda *a, **k: pytest.fail("retrained"))
    assert run("train", "--config", tiny_config, "--out", out, "--resume") == 0


def test_dump_decompose_on_bundled_dump(tmp_path):
    cfg = yaml.safe_load((ROOT / "configs" / "sample_dump.yaml").read_text())
    cfg["dump"]["path"] = str(ROOT / "data" / "sample_dump.jsonl")
    path = tmp_path / "d.yaml"
    path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "dd"
    assert run("dump-decompose", "--config", path, "--out", out) == 0
    report = json.loads((out / "dump_ranks.json").read_text())
    assert [r["rank"] for r in report["rules"]] == [2, 3]
    assert report["joint_rank"] == 5
    # no rules configured is a config error
    assert run("dump-decompose", "--dump", ROOT / "data" / "sample_dump.jsonl", "--out", out) == 2


def test_malformed_dump_is_rejected(tmp_path, tiny_config):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"role": "key", "vector": [1.0]}\n')
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"dump": {"rules": [{"label": "z1"}]}}))
    assert run("dump-decompose", "--config", cfg, "--dump", bad, "--out", tmp_path / "o") == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "qkspace.cli", "print-default-config"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "task:" in res.stdout
    res = subprocess.run([sys.executable, "-m", "qkspace.cli", "train", "--config", "/nonexistent.yaml"],
                         capture_output=True, text=True)
    assert res.returncode == 2
