#!/usr/bin/env python3
"""Run every bundled config (MNIST only when its data is present) into artifacts/<name>."""

import argparse
import os
import sys
from pathlib import Path

from sgdthermo import experiments
from sgdthermo.errors import InvalidArgument

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "artifacts"))
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--only", nargs="*", help="config stems to run")
    args = ap.parse_args()
    for path in sorted((ROOT / "configs").glob("*.toml")):
        if args.only and path.stem not in args.only:
            continue
        try:
            cfg = experiments.load_config(path)
        except InvalidArgument as exc:
            print(f"skip {path.stem}: {exc}", file=sys.stderr)
            continue
        summary = experiments.run_experiment(cfg, Path(args.out) / cfg.name, args.workers,
                                             log=lambda m: print(m, file=sys.stderr))
        print(f"{cfg.name}: {summary['wall_time_s']:.1f} s, {len(summary['artifacts'])} artifacts")


if __name__ == "__main__":
    main()
