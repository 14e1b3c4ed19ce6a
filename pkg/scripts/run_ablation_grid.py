#!/usr/bin/env python3
"""Train every ablation mode over several seeds and print the grid.

Takes a base run config; mode and seed are overridden per cell, checkpoints
land under <checkpoint_dir>/<mode>-seed<seed>/. The test split is scored with
the basic branch.

    python3 scripts/run_ablation_grid.py --config runs/bench.ini \
        --seeds 0,1,2 --out grid.json
"""

import argparse
import json
import sys

from weakseg.config import MODES, load_config
from weakseg.trainer import load_dataset, run_ablation_grid


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True, help="base run config INI")
    parser.add_argument("--modes", default=",".join(MODES), help="comma-separated mode list")
    parser.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    parser.add_argument("--split", default="test")
    parser.add_argument("--out", default=None, help="optional JSON output path")
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    dataset = load_dataset(cfg)
    modes = tuple(m.strip() for m in args.modes.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    grid = run_ablation_grid(cfg, dataset, modes=modes, seeds=seeds, split=args.split)
    print(grid.format_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(grid.to_dict(), f, indent=2)
            f.write("\n")
        print(f"grid written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
