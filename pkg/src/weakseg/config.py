"""Run configuration: dataclasses, the INI file schema, canonical hashing.

The full schema (defaults shown) is what `config_text` emits:

    [run]
    mode = csfr-isfr            ; baseline|csfr|isfr|joint|csfr-isfr|isfr-csfr
    seed = 0
    stage1_epochs = 600
    stage2_epochs = 600
    steps_per_epoch = 20
    checkpoint_dir = runs/default
    reset_velocity = true       ; fresh optimizer state at each stage

    [data]
    manifest = data/manifest.txt
    weak_fraction = 0.1         ; fraction of labels revealed per class
    weak_seed = 0
    crop_radius = 2.0           ; meters, training sphere crops
    input_cell = 0.7            ; meters, scene -> network-input subsampling

    [model]
    levels = 3
    widths = 16,24,32
    hook_width = 32
    kernel_points = 7
    first_cell = 0.9
    cell_growth = 2.0
    radius_factor = 2.5
    negative_slope = 0.1
    hook_cap = 1024

    [optimizer]
    learning_rate = 0.01
    momentum = 0.98
    grad_clip = 0.0             ; global grad-norm ceiling, 0 disables

    [losses]
    cr_weight = 1.0
    sr_weight = 1.0
    seg_s_weight = 1.0
    seg_c_weight = 0.0
    stop_gradient_original = false
    normalize_frobenius = true

Relative paths in [data]/[run] are resolved against the config file's
directory at load time. Scene spec files for gen-data use a second INI schema,
also defined here.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, replace

from .backbone import BackboneConfig
from .pointcloud import ClassRecipe, SceneSpec

MODES = ("baseline", "csfr", "isfr", "joint", "csfr-isfr", "isfr-csfr")


class ConfigError(ValueError):
    """Unparseable, unknown, or out-of-range configuration."""


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.98
    grad_clip: float = 0.0  # global grad-norm ceiling before the step; 0 = off

    def __post_init__(self):
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")


@dataclass(frozen=True)
class LossConfig:
    cr_weight: float = 1.0
    sr_weight: float = 1.0
    seg_s_weight: float = 1.0
    seg_c_weight: float = 0.0
    stop_gradient_original: bool = False
    normalize_frobenius: bool = True

    def __post_init__(self):
        for name in ("cr_weight", "sr_weight", "seg_s_weight", "seg_c_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "csfr-isfr"
    seed: int = 0
    stage1_epochs: int = 600
    stage2_epochs: int = 600
    steps_per_epoch: int = 20
    checkpoint_dir: str = "runs/default"
    reset_velocity: bool = True
    manifest: str = "data/manifest.txt"
    weak_fraction: float = 0.10
    weak_seed: int = 0
    crop_radius: float = 2.0
    input_cell: float = 0.7
    model: BackboneConfig = field(default_factory=lambda: BackboneConfig(first_cell=0.9))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    losses: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if not 0.0 < self.weak_fraction <= 1.0:
            raise ConfigError(f"weak_fraction must be in (0, 1], got {self.weak_fraction}")
        if self.crop_radius <= 0 or self.input_cell <= 0:
            raise ConfigError("crop_radius and input_cell must be positive")


_SCHEMA = {
    "run": {
        "mode": str,
        "seed": int,
        "stage1_epochs": int,
        "stage2_epochs": int,
        "steps_per_epoch": int,
        "checkpoint_dir": str,
        "reset_velocity": bool,
    },
    "data": {
        "manifest": str,
        "weak_fraction": float,
        "weak_seed": int,
        "crop_radius": float,
        "input_cell": float,
    },
    "model": {
        "levels": int,
        "widths": "int_tuple",
        "hook_width": int,
        "kernel_points": int,
        "first_cell": float,
        "cell_growth": float,
        "radius_factor": float,
        "negative_slope": float,
        "hook_cap": int,
    },
    "optimizer": {"learning_rate": float, "momentum": float, "grad_clip": float},
    "losses": {
        "cr_weight": float,
        "sr_weight": float,
        "seg_s_weight": float,
        "seg_c_weight": float,
        "stop_gradient_original": bool,
        "normalize_frobenius": bool,
    },
}

_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(raw: str, kind, where: str):
    try:
        if kind is bool:
            return _BOOL_WORDS[raw.strip().lower()]
        if kind == "int_tuple":
            return tuple(int(x) for x in raw.split(","))
        return kind(raw)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(inline_comment_prefixes=(";", "#"))


def parse_config(text: str, base_dir: str = ".") -> TrainConfig:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config syntax: {exc}") from exc
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _convert(raw, _SCHEMA[section][key], f"[{section}] {key}")

    def sect(name):
        return values.get(name, {})

    try:
        model = BackboneConfig(**sect("model"))
        optimizer = OptimizerConfig(**sect("optimizer"))
        losses = LossConfig(**sect("losses"))
        cfg = TrainConfig(
            **sect("run"), **sect("data"), model=model, optimizer=optimizer, losses=losses
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    return replace(cfg, manifest=resolve(cfg.manifest), checkpoint_dir=resolve(cfg.checkpoint_dir))


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def config_text(cfg: TrainConfig) -> str:
    """Canonical serialization; the identity used for checkpoint hashing."""
    m, o, l = cfg.model, cfg.optimizer, cfg.losses
    lines = [
        "[run]",
        f"mode = {cfg.mode}",
        f"seed = {cfg.seed}",
        f"stage1_epochs = {cfg.stage1_epochs}",
        f"stage2_epochs = {cfg.stage2_epochs}",
        f"steps_per_epoch = {cfg.steps_per_epoch}",
        f"checkpoint_dir = {cfg.checkpoint_dir}",
        f"reset_velocity = {str(cfg.reset_velocity).lower()}",
        "",
        "[data]",
        f"manifest = {cfg.manifest}",
        f"weak_fraction = {cfg.weak_fraction!r}",
        f"weak_seed = {cfg.weak_seed}",
        f"crop_radius = {cfg.crop_radius!r}",
        f"input_cell = {cfg.input_cell!r}",
        "",
        "[model]",
        f"levels = {m.levels}",
        f"widths = {','.join(str(w) for w in m.widths)}",
        f"hook_width = {m.hook_width}",
        f"kernel_points = {m.kernel_points}",
        f"first_cell = {m.first_cell!r}",
        f"cell_growth = {m.cell_growth!r}",
        f"radius_factor = {m.radius_factor!r}",
        f"negative_slope = {m.negative_slope!r}",
        f"hook_cap = {m.hook_cap}",
        "",
        "[optimizer]",
        f"learning_rate = {o.learning_rate!r}",
        f"momentum = {o.momentum!r}",
        f"grad_clip = {o.grad_clip!r}",
        "",
        "[losses]",
        f"cr_weight = {l.cr_weight!r}",
        f"sr_weight = {l.sr_weight!r}",
        f"seg_s_weight = {l.seg_s_weight!r}",
        f"seg_c_weight = {l.seg_c_weight!r}",
        f"stop_gradient_original = {str(l.stop_gradient_original).lower()}",
        f"normalize_frobenius = {str(l.normalize_frobenius).lower()}",
        "",
    ]
    return "\n".join(lines)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


def save_config(cfg: TrainConfig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_text(cfg))


# ---------------------------------------------------------------------------
# Scene spec files (for gen-data)

_SCENE_KEYS = {"extent": "float_tuple", "density": float, "color_jitter": float, "position_noise": float}
_CLASS_KEYS = {
    "kind": str,
    "color": "float_tuple",
    "count": "int_tuple",
    "size": "float_tuple",
    "size_jitter": float,
}


def _convert_spec(raw: str, kind, where: str):
    if kind == "float_tuple":
        try:
            return tuple(float(x) for x in raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"{where}: cannot parse {raw!r}") from exc
    return _convert(raw, kind, where)


def parse_scene_spec(text: str) -> SceneSpec:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad scene spec syntax: {exc}") from exc
    scene_kwargs: dict = {}
    recipes: list[ClassRecipe] = []
    for section in cp.sections():
        if section == "scene":
            for key, raw in cp.items(section):
                if key not in _SCENE_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [scene]")
                scene_kwargs[key] = _convert_spec(raw, _SCENE_KEYS[key], f"[scene] {key}")
        elif section.startswith("class."):
            name = section.split(".", 1)[1]
            kwargs: dict = {"name": name}
            for key, raw in cp.items(section):
                if key not in _CLASS_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                kwargs[key] = _convert_spec(raw, _CLASS_KEYS[key], f"[{section}] {key}")
            if "kind" not in kwargs or "color" not in kwargs:
                raise ConfigError(f"[{section}] needs at least kind and color")
            recipes.append(ClassRecipe(**kwargs))
        else:
            raise ConfigError(f"unknown scene spec section [{section}]")
    try:
        return SceneSpec(classes=tuple(recipes), **scene_kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_scene_spec(path: str) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scene_spec(f.read())


def scene_spec_text(spec: SceneSpec) -> str:
    lines = [
        "[scene]",
        f"extent = {', '.join(repr(v) for v in spec.extent)}",
        f"density = {spec.density!r}",
        f"color_jitter = {spec.color_jitter!r}",
        f"position_noise = {spec.position_noise!r}",
    ]
    for recipe in spec.classes:
        lines += [
            "",
            f"[class.{recipe.name}]",
            f"kind = {recipe.kind}",
            f"color = {', '.join(repr(v) for v in recipe.color)}",
            f"count = {recipe.count[0]},{recipe.count[1]}",
            f"size = {', '.join(repr(v) for v in recipe.size)}",
            f"size_jitter = {recipe.size_jitter!r}",
        ]
    return "\n".join(lines) + "\n"


def save_scene_spec(spec: SceneSpec, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(scene_spec_text(spec))
