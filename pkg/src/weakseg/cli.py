"""Command-line surface.

Subcommands:
    gen-data          synthesize a labeled scene dataset from a scene spec
    train             run the configured training schedule
    eval              score a checkpoint on a split, choosing the decoder branch
    export-affinity   write an affinity-colored PLY for one selected point

Errors exit nonzero with a single `error: ...` line on stderr; bad flags exit
2 with usage text. Set WEAKSEG_LOG=debug|info|warning for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .backbone import decode_to_hook, encode, nearest_index
from .checkpoint import load_checkpoint
from .config import load_config, load_scene_spec, parse_config
from .cross_realloc import cap_feature_map
from .pointcloud import (
    export_affinity_ply,
    generate_scene,
    read_cloud,
    write_cloud,
    write_manifest,
)
from .self_realloc import SELF_WEIGHT, self_affinity
from .trainer import BRANCHES, evaluate, load_dataset, run_schedule

log = logging.getLogger("weakseg.cli")


def _setup_logging() -> None:
    level_name = os.environ.get("WEAKSEG_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _cmd_gen_data(args) -> int:
    spec = load_scene_spec(args.spec)
    os.makedirs(args.out, exist_ok=True)
    n_test = max(1, round(0.2 * args.scenes)) if args.scenes >= 2 else 0
    entries = []
    for i in range(args.scenes):
        seed = args.seed + i
        cloud = generate_scene(spec, seed)
        rel = f"{cloud.scene_id}.wspc"
        write_cloud(cloud, os.path.join(args.out, rel))
        split = "test" if i >= args.scenes - n_test else "train"
        entries.append((split, rel))
        log.info("wrote %s (%d points, split=%s)", rel, len(cloud), split)
    write_manifest(os.path.join(args.out, "manifest.txt"), entries)
    print(f"generated {args.scenes} scenes in {args.out} ({n_test} held out for test)")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(cfg)
    result = run_schedule(cfg, dataset, resume=args.resume)
    print(f"training complete: {result.final_path}")
    return 0


def _cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    cfg = parse_config(ck.config_text)
    dataset = load_dataset(cfg)
    store = ck.to_store()
    report = evaluate(store, cfg, dataset, args.split, branch=args.branch)
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")
    print(report.format_table())
    print(f"report written to {args.report}")
    return 0


def _cmd_export_affinity(args) -> int:
    ck = load_checkpoint(args.ckpt)
    cfg = parse_config(ck.config_text)
    store = ck.to_store()
    if SELF_WEIGHT not in store:
        raise ValueError("checkpoint has no self-reallocation weight; train an isfr stage first")
    crop = read_cloud(args.crop)
    if not 0 <= args.point < len(crop):
        raise ValueError(f"point index {args.point} out of range [0, {len(crop)})")
    enc = encode(crop.positions, crop.colors, store, cfg.model)
    hook = decode_to_hook(enc, store, cfg.model)
    hook = cap_feature_map(hook, cfg.model.hook_cap, np.random.default_rng(0))
    bundle = self_affinity(hook.features, store[SELF_WEIGHT])
    target = int(nearest_index(crop.positions[args.point][None, :], hook.positions)[0])
    weights = bundle.norm.data[target]
    export_affinity_ply(hook.positions, weights, args.out)
    print(f"affinity for point {args.point} (hook point {target}) written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakseg",
        description="Weakly supervised point cloud segmentation with feature reallocation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="synthesize a labeled scene dataset")
    gen.add_argument("--spec", required=True, help="scene spec INI file")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--scenes", required=True, type=int, help="number of scenes")
    gen.add_argument("--seed", type=int, default=0, help="first scene seed")
    gen.set_defaults(func=_cmd_gen_data)

    train = sub.add_parser("train", help="run the configured training schedule")
    train.add_argument("--config", required=True, help="run config INI file")
    train.add_argument("--resume", default=None, help="checkpoint to resume from")
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a split")
    ev.add_argument("--ckpt", required=True, help="checkpoint file")
    ev.add_argument("--split", required=True, help="dataset split name")
    ev.add_argument("--branch", choices=BRANCHES, default="basic")
    ev.add_argument("--report", required=True, help="where to write the JSON report")
    ev.set_defaults(func=_cmd_eval)

    exp = sub.add_parser("export-affinity", help="affinity-colored PLY for one point")
    exp.add_argument("--ckpt", required=True, help="checkpoint file")
    exp.add_argument("--crop", required=True, help="cloud container file")
    exp.add_argument("--point", required=True, type=int, help="point index in the crop")
    exp.add_argument("--out", required=True, help="output PLY path")
    exp.set_defaults(func=_cmd_export_affinity)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
