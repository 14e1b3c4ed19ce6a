#!/usr/bin/env python3
"""Reproduce the directional benchmark: 20 train / 5 test synthetic rooms,
7 classes, 1% weak labels, 3 seeds, four modes (baseline, each single module,
the full csfr-isfr schedule). Prints the grid and the margins over baseline.

Expect roughly half an hour on a desktop CPU.

    python3 scripts/run_benchmark.py --workdir /tmp/weakseg-bench
"""

import argparse
import json
import sys
import time

from weakseg.benchmark import SEEDS, benchmark_config, benchmark_dataset
from weakseg.trainer import run_ablation_grid


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True, help="checkpoint/output directory")
    parser.add_argument("--seeds", default=",".join(str(s) for s in SEEDS))
    parser.add_argument("--out", default=None, help="optional JSON output path")
    args = parser.parse_args(argv)

    cfg = benchmark_config(args.workdir)
    dataset = benchmark_dataset(cfg)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    t0 = time.perf_counter()
    grid = run_ablation_grid(
        cfg, dataset, modes=("baseline", "csfr", "isfr", "csfr-isfr"), seeds=seeds
    )
    print(grid.format_table())
    base = grid.mean("baseline")
    for mode in ("csfr", "isfr", "csfr-isfr"):
        print(f"{mode}: {100 * (grid.mean(mode) - base):+.1f} mIoU points over baseline")
    print(f"total {time.perf_counter() - t0:.0f}s")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(grid.to_dict(), f, indent=2)
            f.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
