"""Run (or reload) every reference experiment used by the acceptance suite.

    python3 scripts/run_reference.py [--only main,continuous,interventions,grid] [--workers N]

Results land in $QKSPACE_ACCEPTANCE_CACHE (default .acceptance_cache/).
"""
import argparse
import sys
import time

from qkspace import reference_runs as ref


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--only", default="main,continuous,interventions,grid")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    steps = args.only.split(",")
    if "main" in steps:
        _, acc = ref.ensure_main(log)
        log(f"main head accuracy {acc:.4f}")
    if "continuous" in steps:
        _, acc = ref.ensure_continuous(log)
        log(f"continuous head accuracy {acc:.4f}")
    if "interventions" in steps:
        for r in ref.ensure_interventions(log):
            log(f"{r['condition']}: alpha_target_after={r['mean_alpha_target_after']:.4f}")
    if "grid" in steps:
        rows = ref.ensure_grid(log, workers=args.workers)
        log(f"grid: {len(rows)} cells")
    log(f"cache: {ref.cache_dir()}")


if __name__ == "__main__":
    sys.exit(main())
