"""Config-driven experiment runs shared by the CLI, scripts and acceptance tests.

Every run writes its outputs plus a ``manifest_<command>.json`` into an output
directory. Outputs contain no timestamps, so repeating a run with the same
config and seed reproduces every file byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .attnmodel import (AttentionHead, TrainConfig, TrainingReport, accuracy, load_head,
                        save_head, train)
from .attribute import attribute_logits, decompose_query, order_by_rank, write_attribution_json
from .contrastive import DeltaC, estimate_delta
from .datagen import LatentMaps, TaskConfig, build_maps, draw_chunked, stream_batch
from .decompose import (SubspaceBasis, estimate_rank, interaction_matrix, subspace_pca,
                        superposition_score)
from .dumps import category_subspace, dump_delta, load_dump, rule_from_dict
from .errors import ConfigError
from .intervene import intervention_suite, write_suite_csv
from .tensorcore import make_rng
from . import render

TEST_SAMPLES = 10_240


# --------------------------------------------------------------------------
# config

@dataclass(frozen=True)
class EstimationConfig:
    n_triplets: int = 100_000
    threshold: float = 0.99
    shard_size: int = 10_000
    seed: int = 0


@dataclass(frozen=True)
class SweepConfig:
    d_head: int = 8
    r1_values: tuple[int, ...] = (2, 3, 4, 5, 6)
    r2_values: tuple[int, ...] = (2, 3, 4, 5, 6)
    seeds: tuple[int, ...] = (0,)
    max_batches: int = 20_000


@dataclass(frozen=True)
class InterveneConfig:
    n_samples: int = 51_200
    seed: int = 0


@dataclass(frozen=True)
class AttributeConfig:
    n_prompts: int = 8
    seed: int = 0


@dataclass(frozen=True)
class PcaConfig:
    n_points: int = 2_000
    k: int = 3
    seed: int = 0


@dataclass(frozen=True)
class DumpConfig:
    path: str = ""
    rules: tuple[dict, ...] = ()
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    intervene: InterveneConfig = field(default_factory=InterveneConfig)
    attribute: AttributeConfig = field(default_factory=AttributeConfig)
    pca: PcaConfig = field(default_factory=PcaConfig)
    dump: DumpConfig = field(default_factory=DumpConfig)
    out: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, TaskConfig):
                d[f.name] = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                d[f.name] = _plain(asdict(v))
            else:
                d[f.name] = v
        return d

    def identity(self) -> dict:
        """Everything that determines results; the output location does not."""
        d = self.to_dict()
        del d["out"]
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Apply one seed to the task maps, training, estimation and evaluation."""
        return replace(
            self, seed=seed,
            task=replace(self.task, seed=seed), train=replace(self.train, seed=seed),
            estimation=replace(self.estimation, seed=seed),
            intervene=replace(self.intervene, seed=seed),
            attribute=replace(self.attribute, seed=seed),
            pca=replace(self.pca, seed=seed), dump=replace(self.dump, seed=seed),
        )


def _plain(obj):
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


_SECTIONS = {"task": TaskConfig, "train": TrainConfig, "estimation": EstimationConfig,
             "sweep": SweepConfig, "intervene": InterveneConfig, "attribute": AttributeConfig,
             "pca": PcaConfig, "dump": DumpConfig}


def _build_section(cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    clean = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        clean[k] = v
    try:
        return cls(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    unknown = set(data) - set(_SECTIONS) - {"out", "seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {name: _build_section(cls, data.get(name)) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(**kwargs, out=str(data.get("out", "runs/default")),
                           seed=int(data.get("seed", 0)))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.estimation.n_triplets <= 0 or cfg.estimation.shard_size <= 0:
        raise ConfigError("estimation counts must be positive")
    if not 0 < cfg.estimation.threshold <= 1:
        raise ConfigError("estimation.threshold must be in (0, 1]")
    if cfg.intervene.n_samples <= 0:
        raise ConfigError("intervene.n_samples must be positive")
    if not cfg.sweep.r1_values or not cfg.sweep.r2_values or not cfg.sweep.seeds:
        raise ConfigError("sweep grids must be non-empty")


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def default_config_text() -> str:
    return yaml.safe_dump(ExperimentConfig().to_dict(), sort_keys=False)


# --------------------------------------------------------------------------
# output helpers

def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": cfg.identity(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": {"qkspace": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        doc.update(extra)
    _atomic_write(out / f"manifest_{command}.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def test_accuracy(head: AttentionHead, task: TaskConfig, maps: LatentMaps, seed: int,
                  n: int = TEST_SAMPLES) -> float:
    return accuracy(head, list(draw_chunked(task, maps, seed, "test", n)))


# --------------------------------------------------------------------------
# train

def run_train(cfg: ExperimentConfig, out, resume: bool = False, log=None):
    """Train one head; returns ``(head, maps, accuracy)``.

    With ``resume`` an existing checkpoint for the same config is reused.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    maps = build_maps(cfg.task)
    ckpt = out / "head.json"
    summary_path = out / "train_summary.json"
    if resume and ckpt.exists() and summary_path.exists():
        summary = json.loads(summary_path.read_text())
        if summary.get("config_hash") == cfg.hash():
            head, _, _ = load_head(ckpt)
            return head, maps, summary["test_accuracy"]

    def cb(row, _head):
        if log is not None:
            log(f"batch {row['batch']}: val_loss={row['val_loss']:.4f} val_acc={row['val_accuracy']:.4f}")

    head, report = train(cfg.task, cfg.train, maps, callback=cb)
    acc = test_accuracy(head, cfg.task, maps, cfg.train.seed)
    save_head(ckpt, head, cfg.task, cfg.train)
    report.write_csv(out / "train_report.csv")
    summary = {"config_hash": cfg.hash(), "test_accuracy": acc, "test_samples": TEST_SAMPLES,
               "best_batch": report.best_batch, "best_val_loss": report.best_val_loss,
               "batches_run": report.batches_run, "stop_reason": report.stop_reason,
               "head_fingerprint": head.fingerprint()}
    _atomic_write(summary_path, json.dumps(summary, indent=1, sort_keys=True) + "\n")
    render.emit(out, "train_curve")
    write_manifest(out, cfg, "train")
    return head, maps, acc


# --------------------------------------------------------------------------
# decomposition

def estimate_bases(cfg: ExperimentConfig, head: AttentionHead, maps: LatentMaps):
    """Contrastive covariances and subspaces for both latents."""
    est = cfg.estimation
    deltas, bases = {}, {}
    for target in ("z1", "z2"):
        dc = estimate_delta(cfg.task, maps, head, target, est.seed, est.n_triplets, est.shard_size)
        deltas[target] = dc
        bases[target] = estimate_rank(dc, est.threshold)
    return deltas, bases


def _write_matrix_csv(path: Path, m: np.ndarray, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if labels is not None:
            w.writerow([""] + list(labels))
        for i, row in enumerate(m):
            head = [labels[i]] if labels is not None else []
            w.writerow(head + [repr(float(x)) for x in row])


def run_decompose(cfg: ExperimentConfig, head: AttentionHead, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    maps = build_maps(cfg.task)
    deltas, bases = estimate_bases(cfg, head, maps)
    for t, dc in deltas.items():
        dc.save(out / f"delta_{t}.json")
    g = interaction_matrix(head, maps)
    _write_matrix_csv(out / "interaction_matrix.csv", g.g, g.labels)
    report = {
        "ground_truth": {"z1": cfg.task.r1, "z2": cfg.task.r2},
        "recovered": {t: b.rank for t, b in bases.items()},
        "singular_values": {t: b.singular_values.tolist() for t, b in bases.items()},
        "threshold": cfg.estimation.threshold,
        "n_triplets": cfg.estimation.n_triplets,
        "superposition_score": superposition_score(g),
    }
    _atomic_write(out / "ranks.json", json.dumps(report, indent=1) + "\n")

    # PCA of queries and keys in each latent's subspace
    b = stream_batch(cfg.task, maps, cfg.pca.seed, "pca", 0, cfg.pca.n_points)
    q = b.xq @ head.w_q.T
    rows = np.arange(len(b))
    k = b.x[rows, b.i_star] @ head.w_k.T
    with open(out / "pca.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        kk = cfg.pca.k
        w.writerow(["latent", "role", "index"] + [f"pc{i + 1}" for i in range(kk)] + ["latent_code"])
        for t, basis in bases.items():
            scores, roles = subspace_pca(q, k, basis, kk)
            z = b.z1 if t == "z1" else b.z2
            codes = z[rows, b.i_star]
            for i, (row, role) in enumerate(zip(scores, roles)):
                code = " ".join(f"{c:g}" for c in codes[i % len(b)])
                padded = list(row) + [0.0] * (kk - len(row))
                w.writerow([t, role, i % len(b)] + [repr(float(x)) for x in padded] + [code])
    render.emit(out, "pca")
    render.emit(out, "interaction")
    write_manifest(out, cfg, "decompose")
    return report


# --------------------------------------------------------------------------
# sweep

SWEEP_COLUMNS = ["d_head", "variant", "seed", "r1", "r2", "recovered_r1", "recovered_r2",
                 "accuracy", "superposition_score", "status"]


def cell_key(d_head: int, variant: str, seed: int, r1: int, r2: int) -> str:
    return f"dh{d_head}_{variant}_s{seed}_r{r1}-{r2}"


def cell_config(cfg: ExperimentConfig, r1: int, r2: int, seed: int) -> ExperimentConfig:
    c = cfg.with_seed(seed)
    return replace(c, task=replace(c.task, d_head=cfg.sweep.d_head, r1=r1, r2=r2),
                   train=replace(c.train, max_batches=cfg.sweep.max_batches))


def run_cell(cfg: ExperimentConfig) -> dict:
    """Train one grid cell and measure rank recovery and superposition."""
    t = cfg.task
    row = {"d_head": t.d_head, "variant": t.variant.value, "seed": cfg.seed, "r1": t.r1, "r2": t.r2}
    try:
        maps = build_maps(t)
        head, report = train(t, cfg.train, maps)
        _, bases = estimate_bases(cfg, head, maps)
        row.update(recovered_r1=bases["z1"].rank, recovered_r2=bases["z2"].rank,
                   accuracy=test_accuracy(head, t, maps, cfg.train.seed),
                   superposition_score=superposition_score(interaction_matrix(head, maps)),
                   status="ok", batches_run=report.batches_run,
                   singular_values={k: b.singular_values.tolist() for k, b in bases.items()},
                   head_fingerprint=head.fingerprint(), config_hash=cfg.hash())
    except Exception as exc:  # a failed cell is recorded and the sweep goes on
        row.update(recovered_r1="", recovered_r2="", accuracy="", superposition_score="",
                   status=f"error: {type(exc).__name__}: {exc}", config_hash=cfg.hash())
    return row


def _cell_job(args):
    cfg, path = args
    row = run_cell(cfg)
    _atomic_write(Path(path), json.dumps(row, indent=1, sort_keys=True) + "\n")
    return row


def run_sweep(cfg: ExperimentConfig, out, workers: int = 1, resume: bool = True, log=None) -> list[dict]:
    out = Path(out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    sw = cfg.sweep
    jobs, rows = [], {}
    order = []
    for seed in sw.seeds:
        for r1 in sw.r1_values:
            for r2 in sw.r2_values:
                key = cell_key(sw.d_head, cfg.task.variant.value, seed, r1, r2)
                order.append(key)
                c = cell_config(cfg, r1, r2, seed)
                path = cells_dir / f"{key}.json"
                if resume and path.exists():
                    done = json.loads(path.read_text())
                    if done.get("config_hash") == c.hash() and done.get("status") == "ok":
                        rows[key] = done
                        continue
                jobs.append((key, c, path))
    if log is not None:
        log(f"{len(order)} cells, {len(jobs)} to run")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (key, _, _), row in zip(jobs, pool.map(_cell_job, [(c, p) for _, c, p in jobs])):
                rows[key] = row
                if log is not None:
                    log(f"{key}: {row['status']}")
    else:
        for key, c, p in jobs:
            rows[key] = _cell_job((c, p))
            if log is not None:
                r = rows[key]
                log(f"{key}: {r['status']} ranks=({r['recovered_r1']},{r['recovered_r2']})")
    ordered = [rows[k] for k in order]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in ordered:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    render.emit(out, "sweep")
    write_manifest(out, cfg, "sweep", {"cells": order})
    return ordered


# --------------------------------------------------------------------------
# interventions and attribution

def run_intervene(cfg: ExperimentConfig, head: AttentionHead, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    maps = build_maps(cfg.task)
    _, bases = estimate_bases(cfg, head, maps)
    rows = intervention_suite(head, cfg.task, maps, bases, cfg.intervene.n_samples, cfg.intervene.seed)
    write_suite_csv(out / "interventions.csv", rows)
    render.emit(out, "interventions")
    write_manifest(out, cfg, "intervene",
                   {"ranks": {t: b.rank for t, b in bases.items()}})
    return rows


def attribution_records(head: AttentionHead, cfg: ExperimentConfig, maps: LatentMaps,
                        bases: dict[str, SubspaceBasis], n_prompts: int, seed: int) -> list[dict]:
    ordered = order_by_rank([bases["z1"], bases["z2"]])
    labels = [b.label for b in ordered]
    b = stream_batch(cfg.task, maps, seed, "attribute", 0, n_prompts)
    records = []
    for i in range(len(b)):
        q = head.w_q @ b.xq[i]
        keys = b.x[i] @ head.w_k.T
        dec = decompose_query(q, ordered, labels)
        att = attribute_logits(keys, dec, head.d_head)
        tokens = [f"t{j}" + ("*" if j == b.i_star[i] else "") for j in range(cfg.task.T)]
        rec = {"prompt": i, "i_star": int(b.i_star[i]), "feature_order": labels}
        rec.update(att.to_json(tokens))
        records.append(rec)
    return records


def run_attribute(cfg: ExperimentConfig, head: AttentionHead, out) -> list[dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    maps = build_maps(cfg.task)
    _, bases = estimate_bases(cfg, head, maps)
    records = attribution_records(head, cfg, maps, bases, cfg.attribute.n_prompts, cfg.attribute.seed)
    write_attribution_json(out / "attribution.json", records)
    render.emit(out, "attribution")
    write_manifest(out, cfg, "attribute")
    return records


# --------------------------------------------------------------------------
# external dumps

def run_dump_decompose(cfg: ExperimentConfig, dump_path, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_dump(dump_path)
    if not cfg.dump.rules:
        raise ConfigError("dump.rules is empty; nothing to decompose")
    report = {"dump": str(Path(dump_path).name), "records": len(records), "rules": []}
    deltas = []
    for i, spec in enumerate(cfg.dump.rules):
        rule = rule_from_dict(spec)
        dc, stats = dump_delta(records, rule, make_rng(cfg.dump.seed, "dump-rule", i))
        basis = estimate_rank(dc, cfg.estimation.threshold)
        deltas.append(dc)
        dc.save(out / f"delta_{i}_{rule.name}.json")
        report["rules"].append({"name": rule.name, "rank": basis.rank, **stats.to_dict(),
                                "singular_values": basis.singular_values.tolist()})
    if len(deltas) > 1:
        joint = category_subspace(deltas, cfg.estimation.threshold)
        report["joint_rank"] = joint.rank
    _atomic_write(out / "dump_ranks.json", json.dumps(report, indent=1) + "\n")
    write_manifest(out, cfg, "dump-decompose")
    return report


def load_checkpoint(path) -> AttentionHead:
    head, _, _ = load_head(path)
    return head


__all__ = [
    "ExperimentConfig", "EstimationConfig", "SweepConfig", "InterveneConfig", "AttributeConfig",
    "PcaConfig", "DumpConfig", "config_from_dict", "load_config", "default_config_text",
    "run_train", "run_decompose", "run_sweep", "run_cell", "run_intervene", "run_attribute",
    "run_dump_decompose", "estimate_bases", "attribution_records", "test_accuracy",
    "TrainingReport", "DeltaC",
]
