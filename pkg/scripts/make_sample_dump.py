"""Regenerate data/sample_dump.jsonl: toy-head activations in the dump format.

The dump holds 500 triplet prompts per latent from an untrained d_head=8 head
on the discrete task with (r1, r2) = (2, 3). Decompose it with

    qkspace dump-decompose --config configs/sample_dump.yaml --out runs/sample_dump
"""
import argparse
from pathlib import Path

from qkspace.attnmodel import init_head
from qkspace.contrastive import make_triplets
from qkspace.datagen import TaskConfig, build_maps
from qkspace.dumps import records_from_triplets, write_dump
from qkspace.tensorcore import make_rng

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default=str(ROOT / "data" / "sample_dump.jsonl"))
    p.add_argument("--n", type=int, default=500, help="triplet prompts per latent")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    cfg = TaskConfig(d_head=8, r1=2, r2=3, seed=args.seed)
    maps = build_maps(cfg)
    head = init_head(cfg, make_rng(args.seed, "init"))
    source = {"model": "toy-d8", "layer": 0, "head": 0}
    records = []
    for target in ("z1", "z2"):
        tb = make_triplets(cfg, maps, head, target, make_rng(args.seed, "dump", target), args.n)
        records += records_from_triplets(tb, source)
    write_dump(args.out, records, cfg.d_head)
    print(f"{len(records)} records written to {args.out}")


if __name__ == "__main__":
    main()
