"""The synthetic directional benchmark: fixed scene recipe, dataset sizes, and
run configuration used by the acceptance experiment and the benchmark script.

Desk-scale stand-in for full-dataset training: 20 train / 5 test rooms with 7
classes, 1% of input points labeled, three training seeds. The optimizer here
deviates from the config defaults (lower rate, clipping on): the unnormalized
desk-scale network diverges at the default effective rate.
"""

from __future__ import annotations

from weakseg.backbone import BackboneConfig
from weakseg.config import OptimizerConfig, TrainConfig
from weakseg.pointcloud import SceneSpec, default_scene_spec, generate_scene
from weakseg.trainer import Dataset, build_dataset

TRAIN_SCENES = 20
TEST_SCENES = 5
NUM_CLASSES = 7
SEEDS = (0, 1, 2)


def benchmark_scene_spec() -> SceneSpec:
    return default_scene_spec(NUM_CLASSES)


def benchmark_config(checkpoint_dir: str) -> TrainConfig:
    return TrainConfig(
        mode="csfr-isfr",
        seed=0,
        stage1_epochs=300,
        stage2_epochs=300,
        steps_per_epoch=20,
        checkpoint_dir=checkpoint_dir,
        manifest="unused-in-memory",
        weak_fraction=0.01,
        weak_seed=0,
        crop_radius=2.0,
        input_cell=0.7,
        model=BackboneConfig(
            levels=3,
            widths=(16, 24, 32),
            hook_width=32,
            kernel_points=7,
            first_cell=0.9,
        ),
        optimizer=OptimizerConfig(learning_rate=0.01, momentum=0.95, grad_clip=5.0),
    )


def benchmark_dataset(cfg: TrainConfig, scene_seed: int = 0) -> Dataset:
    spec = benchmark_scene_spec()
    clouds = {
        "train": [generate_scene(spec, scene_seed + s) for s in range(TRAIN_SCENES)],
        "test": [generate_scene(spec, scene_seed + 100 + s) for s in range(TEST_SCENES)],
    }
    return build_dataset(clouds, cfg)
