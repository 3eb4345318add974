"""Command-line entry point.

    qkspace train --config cfg.yaml --out runs/a
    qkspace sweep --config cfg.yaml --out runs/grid --workers 4 --resume
    qkspace decompose --out runs/a            # uses runs/a/head.json
    qkspace intervene --head runs/a/head.json --out runs/a/intervene
    qkspace dump-decompose --dump data/sample_dump.jsonl --config dump.yaml
    qkspace print-default-config > cfg.yaml

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .attnmodel import load_head
from .errors import ConfigError, EmptyEstimateError, NumericalError, ParseError, SchemaError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


class MissingArtifact(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkspace", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, head=False, dump=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML config file (defaults are used for missing keys)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        sp.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
        sp.add_argument("--resume", action="store_true", help="reuse completed outputs")
        if head:
            sp.add_argument("--head", help="head checkpoint (default: <out>/head.json)")
        if dump:
            sp.add_argument("--dump", help="activation dump (default: config dump.path)")
        return sp

    add("train", "train one attention head")
    add("sweep", "train and decompose every cell of a rank grid")
    add("decompose", "contrastive covariances, ranks, interaction matrix and PCA", head=True)
    add("intervene", "key-swap intervention suite", head=True)
    add("attribute", "per-feature attention-logit attribution", head=True)
    add("dump-decompose", "contrastive ranks from a labeled activation dump", dump=True)
    sub.add_parser("print-default-config", help="print the full default config as YAML")
    return p


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return cfg


def _head(args, cfg):
    path = Path(args.head) if args.head else Path(cfg.out) / "head.json"
    if not path.exists():
        raise MissingArtifact(f"head checkpoint not found: {path}")
    head, task, _ = load_head(path)
    # the checkpoint fixes the task (and with it the latent maps)
    return head, replace(cfg, task=task)


def _run(args) -> int:
    if args.command == "print-default-config":
        sys.stdout.write(ex.default_config_text())
        return EXIT_OK
    if args.config and not Path(args.config).exists():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = _config(args)
    out = Path(cfg.out)

    if args.command == "train":
        _, _, acc = ex.run_train(cfg, out, resume=args.resume, log=_log)
        print(f"accuracy {acc:.4f} on {ex.TEST_SAMPLES} held-out samples")
    elif args.command == "sweep":
        rows = ex.run_sweep(cfg, out, workers=args.workers, resume=args.resume, log=_log)
        failed = sum(r["status"] != "ok" for r in rows)
        print(f"{len(rows)} cells written to {out / 'sweep.csv'} ({failed} failed)")
    elif args.command == "decompose":
        head, cfg = _head(args, cfg)
        rep = ex.run_decompose(cfg, head, out)
        print(f"recovered ranks z1={rep['recovered']['z1']} z2={rep['recovered']['z2']} "
              f"superposition={rep['superposition_score']:.4f}")
    elif args.command == "intervene":
        head, cfg = _head(args, cfg)
        for r in ex.run_intervene(cfg, head, out):
            print(f"{r.condition:12s} alpha_target_after={r.mean_alpha_target_after:.4f} "
                  f"shift={r.mean_mass_shifted:+.4f}")
    elif args.command == "attribute":
        head, cfg = _head(args, cfg)
        recs = ex.run_attribute(cfg, head, out)
        print(f"{len(recs)} prompts written to {out / 'attribution.json'}")
    elif args.command == "dump-decompose":
        path = args.dump or cfg.dump.path
        if not path:
            raise ConfigError("no dump given (--dump or dump.path)")
        if not Path(path).exists():
            raise MissingArtifact(f"dump not found: {path}")
        rep = ex.run_dump_decompose(cfg, path, out)
        for r in rep["rules"]:
            print(f"{r['name']}: rank {r['rank']} from {r['triplets']} triplets")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ParseError, SchemaError, EmptyEstimateError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        _log(f"missing artifact: {exc}")
        return EXIT_MISSING
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
