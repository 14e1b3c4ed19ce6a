"""Training orchestration: dataset assembly, the stage/mode schedule,
deterministic training loops, evaluation with branch selection, and the
ablation grid harness.

Determinism contract: every random draw comes from a generator seeded by
(config seed, stage index, epoch) or by stable per-scene hashes, so identical
(config, dataset) runs produce bit-identical checkpoints, and resuming from a
saved epoch replays exactly the run that would have happened anyway.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import NonFiniteError, ParamStore, SGDMomentum, backward, parameter
from .backbone import build_backbone_params, decode_from_hook, decode_to_hook, encode, forward_logits
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import MODES, TrainConfig, config_hash, config_text
from .cross_realloc import (
    CROSS_WEIGHT,
    cap_feature_map,
    cross_affinity,
    init_cross_params,
    reallocate_cross,
    stage1_loss,
)
from .pointcloud import (
    PointCloud,
    SubsampleMap,
    back_project,
    read_cloud,
    read_manifest,
    sample_crop,
    sample_pair,
    sample_weak_labels,
    subsample_cloud,
)
from .self_realloc import SELF_WEIGHT, init_self_params, reallocate_self, self_affinity

log = logging.getLogger("weakseg.trainer")

# Disjoint seed streams: stage initialization vs. per-epoch sampling.
_INIT_STREAM = 900_000
_EVAL_PARTNER_STREAM = 700_000

BRANCHES = ("basic", "cross", "intra")


class TrainingDiverged(RuntimeError):
    """The loss (or a parameter) went non-finite during optimization."""


def _clip_gradients(store: ParamStore, max_norm: float) -> None:
    """Scale all gradients so their global L2 norm stays under max_norm.
    Occasional hard crops spike the gradient by 30-60x, which momentum would
    otherwise amplify into divergence."""
    total = 0.0
    for _, p in store.items():
        if p._grad is not None:
            total += float((p._grad * p._grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for _, p in store.items():
            if p._grad is not None:
                p._grad *= factor


@dataclass
class SceneBundle:
    original: PointCloud
    inputs: PointCloud  # grid-subsampled network input with weak labels
    smap: SubsampleMap


@dataclass
class Dataset:
    splits: dict[str, list[SceneBundle]]
    num_classes: int

    def split(self, name: str) -> list[SceneBundle]:
        bundles = self.splits.get(name, [])
        if not bundles:
            raise ValueError(f"split {name!r} is empty or unknown")
        return bundles


def _scene_seed(weak_seed: int, scene_id: str) -> int:
    digest = hashlib.sha256(scene_id.encode("utf-8")).digest()
    return int(np.random.SeedSequence([weak_seed, int.from_bytes(digest[:8], "little")]).generate_state(1)[0])


def prepare_bundle(cloud: PointCloud, cfg: TrainConfig) -> SceneBundle:
    inputs, smap = subsample_cloud(cloud, cfg.input_cell)
    inputs = sample_weak_labels(inputs, cfg.weak_fraction, _scene_seed(cfg.weak_seed, cloud.scene_id))
    log.debug(
        "scene %s: %d -> %d input points (%.1f%%), %d weak labels",
        cloud.scene_id,
        len(cloud),
        len(inputs),
        100.0 * len(inputs) / len(cloud),
        int(inputs.weak_mask.sum()),
    )
    return SceneBundle(original=cloud, inputs=inputs, smap=smap)


def build_dataset(clouds_by_split: dict[str, list[PointCloud]], cfg: TrainConfig) -> Dataset:
    splits: dict[str, list[SceneBundle]] = {}
    num_classes = None
    for split, clouds in clouds_by_split.items():
        splits[split] = [prepare_bundle(c, cfg) for c in clouds]
        for c in clouds:
            if num_classes is None:
                num_classes = c.num_classes
            elif c.num_classes != num_classes:
                raise ValueError("scenes disagree on class count")
    if num_classes is None:
        raise ValueError("dataset has no scenes")
    return Dataset(splits=splits, num_classes=num_classes)


def load_dataset(cfg: TrainConfig) -> Dataset:
    entries = read_manifest(cfg.manifest)
    base = os.path.dirname(os.path.abspath(cfg.manifest))
    clouds: dict[str, list[PointCloud]] = {}
    for split, rel in entries:
        clouds.setdefault(split, []).append(read_cloud(os.path.join(base, rel)))
    return build_dataset(clouds, cfg)


# ---------------------------------------------------------------------------
# Stage schedule


def schedule_for(cfg: TrainConfig) -> list[tuple[str, int]]:
    """Stage kinds and epoch budgets per mode. Single-stage modes get the full
    two-stage budget so mode comparisons are update-count fair."""
    s1, s2 = cfg.stage1_epochs, cfg.stage2_epochs
    table = {
        "baseline": [("baseline", s1 + s2)],
        "csfr": [("csfr", s1 + s2)],
        "isfr": [("isfr", s1 + s2)],
        "joint": [("joint", s1 + s2)],
        "csfr-isfr": [("csfr", s1), ("isfr", s2)],
        "isfr-csfr": [("isfr", s1), ("csfr", s2)],
    }
    return table[cfg.mode]


def _module_weights_for(kind: str) -> tuple[bool, bool]:
    """(needs cross weight, needs self weight)."""
    return kind in ("csfr", "joint"), kind in ("isfr", "joint")


def stage_store(
    cfg: TrainConfig,
    num_classes: int,
    kind: str,
    stage_index: int,
    backbone_from: ParamStore | None = None,
) -> ParamStore:
    """Parameter set for a stage: encoder/decoder either freshly initialized or
    inherited bit-exactly, reallocation weights always initialized fresh (the
    previous stage's module weight is discarded)."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _INIT_STREAM + stage_index)))
    if backbone_from is None:
        store = build_backbone_params(cfg.model, num_classes, rng)
    else:
        store = ParamStore()
        for name, p in backbone_from.items():
            if name in (CROSS_WEIGHT, SELF_WEIGHT):
                continue
            store.add(name, parameter(p.data.copy(), name))
    needs_cross, needs_self = _module_weights_for(kind)
    if needs_cross:
        init_cross_params(store, cfg.model.hook_width, rng)
    if needs_self:
        init_self_params(store, cfg.model.hook_width, rng)
    return store


def _step_loss(kind: str, store: ParamStore, cfg: TrainConfig, train_inputs, rng):
    losses = cfg.losses
    if kind in ("csfr", "joint"):
        (ai, ca), (bi, cb) = sample_pair(train_inputs, rng, cfg.crop_radius)
        crop_a = train_inputs[ai].take(ca.indices)
        crop_b = train_inputs[bi].take(cb.indices)
        res = stage1_loss(
            crop_a,
            crop_b,
            store,
            cfg.model,
            cr_weight=losses.cr_weight,
            seg_c_weight=losses.seg_c_weight,
            stop_gradient_original=losses.stop_gradient_original,
            normalize_frobenius=losses.normalize_frobenius,
            rng=rng,
        )
        loss, terms = res.loss, dict(res.terms)
        if kind == "joint":
            from .self_realloc import stage2_loss

            for tag, crop in (("a", crop_a), ("b", crop_b)):
                r2 = stage2_loss(
                    crop,
                    store,
                    cfg.model,
                    sr_weight=losses.sr_weight,
                    seg_s_weight=losses.seg_s_weight,
                    normalize_frobenius=losses.normalize_frobenius,
                    rng=rng,
                )
                loss = loss + r2.loss
                for key, val in r2.terms.items():
                    terms[f"{key}_{tag}"] = val
            terms["total"] = loss.item()
        return loss, terms
    if kind in ("isfr", "baseline"):
        from .self_realloc import stage2_loss

        ci, sc = sample_crop(train_inputs, rng, cfg.crop_radius)
        crop = train_inputs[ci].take(sc.indices)
        sr_w = losses.sr_weight if kind == "isfr" else 0.0
        seg_s_w = losses.seg_s_weight if kind == "isfr" else 0.0
        res = stage2_loss(
            crop,
            store,
            cfg.model,
            sr_weight=sr_w,
            seg_s_weight=seg_s_w,
            normalize_frobenius=losses.normalize_frobenius,
            rng=rng,
        )
        return res.loss, dict(res.terms)
    raise ValueError(f"unknown stage kind {kind!r}")


def run_stage(
    kind: str,
    store: ParamStore,
    cfg: TrainConfig,
    dataset: Dataset,
    stage_index: int,
    epochs: int,
    start_epoch: int = 0,
    velocities: dict[str, np.ndarray] | None = None,
    checkpoint_path: str | None = None,
) -> tuple[list[dict[str, float]], dict[str, np.ndarray]]:
    """Optimize `store` in place for the given epochs; returns the per-step
    loss-term history and the final optimizer velocities."""
    train_inputs = [b.inputs for b in dataset.split("train")]
    opt = SGDMomentum(cfg.optimizer.learning_rate, cfg.optimizer.momentum)
    if velocities:
        opt.velocities = {k: v.copy() for k, v in velocities.items() if k in store}
    history: list[dict[str, float]] = []
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, stage_index, epoch)))
        epoch_total = 0.0
        for step in range(cfg.steps_per_epoch):
            try:
                store.clear_grads()
                loss, terms = _step_loss(kind, store, cfg, train_inputs, rng)
                backward(loss)
                if cfg.optimizer.grad_clip > 0.0:
                    _clip_gradients(store, cfg.optimizer.grad_clip)
                opt.step(store)
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value in stage {stage_index} ({kind}) "
                    f"epoch {epoch} step {step}: {exc}"
                ) from exc
            history.append(terms)
            epoch_total += terms["total"]
        log.info(
            "stage %d (%s) epoch %d/%d mean loss %.5f",
            stage_index,
            kind,
            epoch + 1,
            epochs,
            epoch_total / cfg.steps_per_epoch,
        )
        if checkpoint_path is not None:
            save_checkpoint(
                Checkpoint(
                    config_text=config_text(cfg),
                    stage_index=stage_index,
                    epoch=epoch + 1,
                    params=store.state_dict(),
                    velocities={k: v.copy() for k, v in opt.velocities.items()},
                ),
                checkpoint_path,
            )
    return history, opt.velocities


@dataclass
class ScheduleResult:
    final_path: str
    stage_paths: list[str]
    histories: dict[str, list[dict[str, float]]]
    store: ParamStore


def run_schedule(cfg: TrainConfig, dataset: Dataset, resume: str | None = None) -> ScheduleResult:
    """Run the mode's full stage schedule, checkpointing at each stage end
    (plus a rolling latest.ckpt per epoch for resume)."""
    stages = schedule_for(cfg)
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    histories: dict[str, list[dict[str, float]]] = {}
    stage_paths: list[str] = []

    if resume is None:
        si, ep = 0, 0
        store = stage_store(cfg, dataset.num_classes, stages[0][0], 0)
        velocities: dict[str, np.ndarray] = {}
    else:
        ck = load_checkpoint(resume)
        if ck.config_hash != config_hash(cfg):
            raise CheckpointError(
                "config hash mismatch on resume: the checkpoint was written by a different run"
            )
        si, ep = ck.stage_index, ck.epoch
        if si >= len(stages):
            raise CheckpointError(f"checkpoint stage {si} is outside the schedule")
        store = ck.to_store()
        velocities = dict(ck.velocities)
        if ep >= stages[si][1]:  # saved at a stage boundary: move on
            si, ep = si + 1, 0
            if si < len(stages):
                store = stage_store(cfg, dataset.num_classes, stages[si][0], si, backbone_from=store)
                velocities = {} if cfg.reset_velocity else velocities

    latest = os.path.join(cfg.checkpoint_dir, "latest.ckpt")
    while si < len(stages):
        kind, epochs = stages[si]
        hist, velocities = run_stage(
            kind, store, cfg, dataset, si, epochs,
            start_epoch=ep, velocities=velocities, checkpoint_path=latest,
        )
        histories[f"stage{si}-{kind}"] = hist
        stage_path = os.path.join(cfg.checkpoint_dir, f"stage{si}-{kind}.ckpt")
        save_checkpoint(
            Checkpoint(
                config_text=config_text(cfg),
                stage_index=si,
                epoch=epochs,
                params=store.state_dict(),
                velocities={k: v.copy() for k, v in velocities.items()},
            ),
            stage_path,
        )
        stage_paths.append(stage_path)
        si, ep = si + 1, 0
        if si < len(stages):
            store = stage_store(cfg, dataset.num_classes, stages[si][0], si, backbone_from=store)
            velocities = {} if cfg.reset_velocity else velocities

    final_path = os.path.join(cfg.checkpoint_dir, "final.ckpt")
    save_checkpoint(
        Checkpoint(
            config_text=config_text(cfg),
            stage_index=len(stages) - 1,
            epoch=stages[-1][1],
            params=store.state_dict(),
            velocities={k: v.copy() for k, v in velocities.items()},
        ),
        final_path,
    )
    return ScheduleResult(final_path, stage_paths, histories, store)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    split: str
    branch: str
    per_class_iou: list[float | None]  # None where the class is absent from GT
    miou: float
    total_points: int
    scenes: int
    runtime_seconds: float
    module_reads: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "branch": self.branch,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "total_points": self.total_points,
            "scenes": self.scenes,
            "runtime_seconds": self.runtime_seconds,
            "module_reads": self.module_reads,
        }

    def format_table(self) -> str:
        lines = [
            f"split={self.split} branch={self.branch} scenes={self.scenes} "
            f"points={self.total_points} runtime={self.runtime_seconds:.2f}s",
            f"{'class':>8}  IoU",
        ]
        for c, iou in enumerate(self.per_class_iou):
            lines.append(f"{c:>8}  {'absent' if iou is None else f'{iou:.4f}'}")
        lines.append(f"{'mIoU':>8}  {self.miou:.4f}")
        return "\n".join(lines)


def _branch_logits(branch: str, bundle: SceneBundle, partner: SceneBundle, store, cfg, rng):
    model = cfg.model
    if branch == "basic":
        logits, _, _ = forward_logits(bundle.inputs, store, model)
        return logits
    enc = encode(bundle.inputs.positions, bundle.inputs.colors, store, model)
    hook = decode_to_hook(enc, store, model)
    capped = cap_feature_map(hook, model.hook_cap, rng)
    if branch == "intra":
        norm = self_affinity(capped.features, store[SELF_WEIGHT]).norm
        warped = reallocate_self(norm, capped)
        return decode_from_hook(warped, enc, store, model)
    if branch == "cross":
        enc_p = encode(partner.inputs.positions, partner.inputs.colors, store, model)
        hook_p = cap_feature_map(decode_to_hook(enc_p, store, model), model.hook_cap, rng)
        bundle_aff = cross_affinity(capped.features, hook_p.features, store[CROSS_WEIGHT])
        reallocated = reallocate_cross(bundle_aff.row_norm, hook_p, capped.positions)
        return decode_from_hook(reallocated, enc, store, model)
    raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")


def evaluate(
    store: ParamStore, cfg: TrainConfig, dataset: Dataset, split: str, branch: str = "basic"
) -> EvalReport:
    """Whole-scene inference per split scene, back-projected to the original
    clouds, scored by confusion-matrix IoU. The basic branch is the inference
    path and must not touch the reallocation weights; read counters prove it.
    """
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
    bundles = dataset.split(split)
    num_classes = dataset.num_classes
    if branch == "cross" and CROSS_WEIGHT not in store:
        raise ValueError("checkpoint has no cross-reallocation weight; train a csfr stage first")
    if branch == "intra" and SELF_WEIGHT not in store:
        raise ValueError("checkpoint has no self-reallocation weight; train an isfr stage first")

    store.reset_reads()
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    total_points = 0
    t0 = time.perf_counter()
    for i, bundle in enumerate(bundles):
        rng = np.random.default_rng(np.random.SeedSequence((_EVAL_PARTNER_STREAM, i)))
        if len(bundles) > 1:
            partner = bundles[int(rng.choice([j for j in range(len(bundles)) if j != i]))]
        else:
            partner = bundle
        logits = _branch_logits(branch, bundle, partner, store, cfg, rng)
        pred_inputs = logits.data.argmax(axis=1)
        pred_original = back_project(pred_inputs, bundle.smap)
        np.add.at(conf, (bundle.original.labels, pred_original), 1)
        total_points += len(bundle.original)
    runtime = time.perf_counter() - t0

    module_reads = {
        "cross_realloc": store.read_count("cross_realloc"),
        "self_realloc": store.read_count("self_realloc"),
    }
    if branch == "basic":
        assert module_reads["cross_realloc"] == 0 and module_reads["self_realloc"] == 0, (
            "basic-branch evaluation read reallocation weights"
        )

    per_class: list[float | None] = []
    present = []
    for c in range(num_classes):
        tp = conf[c, c]
        denom = conf[c, :].sum() + conf[:, c].sum() - tp
        if conf[c, :].sum() == 0:
            per_class.append(None)
            continue
        iou = float(tp) / float(denom) if denom else 0.0
        per_class.append(iou)
        present.append(iou)
    miou = float(np.mean(present)) if present else 0.0
    return EvalReport(
        split=split,
        branch=branch,
        per_class_iou=per_class,
        miou=miou,
        total_points=total_points,
        scenes=len(bundles),
        runtime_seconds=runtime,
        module_reads=module_reads,
    )


# ---------------------------------------------------------------------------
# Ablation grid harness


@dataclass
class GridResult:
    split: str
    modes: list[str]
    seeds: list[int]
    miou: dict[str, list[float]]  # mode -> per-seed test mIoU

    def mean(self, mode: str) -> float:
        return float(np.mean(self.miou[mode]))

    def std(self, mode: str) -> float:
        return float(np.std(self.miou[mode]))

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "seeds": self.seeds,
            "modes": {
                mode: {"per_seed": self.miou[mode], "mean": self.mean(mode), "std": self.std(mode)}
                for mode in self.modes
            },
        }

    def format_table(self) -> str:
        lines = [f"{'mode':>10}  {'mean mIoU':>9}  {'std':>7}  per-seed"]
        for mode in self.modes:
            per_seed = " ".join(f"{v:.4f}" for v in self.miou[mode])
            lines.append(f"{mode:>10}  {self.mean(mode):9.4f}  {self.std(mode):7.4f}  {per_seed}")
        return "\n".join(lines)


def run_ablation_grid(
    base_cfg: TrainConfig,
    dataset: Dataset,
    modes: tuple[str, ...] = MODES,
    seeds: tuple[int, ...] = (0, 1, 2),
    split: str = "test",
) -> GridResult:
    """One sweep over (mode, seed); each cell trains the full schedule and
    scores the basic branch on the held-out split."""
    miou: dict[str, list[float]] = {mode: [] for mode in modes}
    for mode in modes:
        for seed in seeds:
            cfg = replace(
                base_cfg,
                mode=mode,
                seed=seed,
                checkpoint_dir=os.path.join(base_cfg.checkpoint_dir, f"{mode}-seed{seed}"),
            )
            result = run_schedule(cfg, dataset)
            report = evaluate(result.store, cfg, dataset, split, branch="basic")
            miou[mode].append(report.miou)
            log.info("grid: mode=%s seed=%d test mIoU %.4f", mode, seed, report.miou)
    return GridResult(split=split, modes=list(modes), seeds=list(seeds), miou=miou)
