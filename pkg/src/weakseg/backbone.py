"""Simplified kernel-point encoder/decoder segmentation network.

The encoder stacks bottleneck residual blocks built on kernel-point
convolutions, with strided grid subsampling between levels. The decoder is
nearest-neighbor upsampling plus unary (1x1) convolutions with skip
concatenation. Features exposed after the first upsampling step (the "hook")
are where the reallocation modules attach; the rest of the decoder maps hook
features to per-point class scores.

Geometry is all relative (neighbor offsets, kernel offsets), so features are
translation invariant; point order only permutes rows. Positions carry no
gradient: learning flows through features and weights alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add,
    add_bias,
    concat_cols,
    gather_rows,
    leaky_relu,
    matmul,
    parameter,
)
from .pointcloud import PointCloud, grid_subsample

log = logging.getLogger("weakseg.backbone")

# Kernel point shell radius and influence extent, as fractions of the
# conv radius at each level.
KERNEL_RADIUS_RATIO = 0.5
INFLUENCE_RATIO = 0.5


@dataclass(frozen=True)
class BackboneConfig:
    levels: int = 3
    widths: tuple[int, ...] = (16, 24, 32)
    hook_width: int = 32
    kernel_points: int = 7
    first_cell: float = 0.35
    cell_growth: float = 2.0
    radius_factor: float = 2.5
    negative_slope: float = 0.1
    hook_cap: int = 1024

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.widths) != self.levels:
            raise ValueError(f"expected {self.levels} widths, got {len(self.widths)}")
        if min(self.widths) < 2 or self.hook_width < 1 or self.kernel_points < 1:
            raise ValueError("widths, hook_width and kernel_points must be positive")
        if self.first_cell <= 0 or self.cell_growth <= 1.0 or self.radius_factor <= 0:
            raise ValueError("invalid level geometry parameters")
        if self.hook_cap < 1:
            raise ValueError("hook_cap must be >= 1")

    def subsample_cell(self, level: int) -> float:
        """Voxel size used to build `level` from `level - 1` (level >= 1)."""
        return self.first_cell * self.cell_growth ** (level - 1)

    def conv_radius(self, level: int) -> float:
        """Neighbor search radius for convolutions whose queries live at `level`."""
        base = self.first_cell / self.cell_growth if level == 0 else self.subsample_cell(level)
        return self.radius_factor * base

    @property
    def hook_level(self) -> int:
        if self.levels < 2:
            raise ValueError("a hook after the first upsampling needs >= 2 levels")
        return self.levels - 2


@dataclass
class FeatureMap:
    positions: np.ndarray  # (N, 3), original frame
    features: Tensor  # (N, K)
    level: int

    def __post_init__(self):
        if self.positions.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"positions ({self.positions.shape[0]}) and features "
                f"({self.features.shape[0]}) disagree"
            )

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]


@dataclass
class EncodeResult:
    maps: list[FeatureMap]  # encoder output per level
    input_features: Tensor  # the (N0, D) leaf the crop was fed as


def kernel_offsets(count: int, radius: float) -> np.ndarray:
    """One center point plus a Fibonacci-sphere shell of count-1 offsets."""
    if count == 1:
        return np.zeros((1, 3))
    shell = count - 1
    i = np.arange(shell, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / shell
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1) * radius
    return np.concatenate([np.zeros((1, 3)), pts], axis=0)


def radius_neighbors(
    query_positions: np.ndarray, support_positions: np.ndarray, radius: float
) -> np.ndarray:
    """Exact radius search via grid hashing; returns a (Q, N) boolean mask.

    Support points are bucketed into cells of side `radius`; candidates for a
    query are the 27 surrounding cells, then filtered by true distance.
    """
    q = np.asarray(query_positions, dtype=np.float64)
    s = np.asarray(support_positions, dtype=np.float64)
    mask = np.zeros((q.shape[0], s.shape[0]), dtype=bool)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    keys = np.floor(s / radius).astype(np.int64)
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    r2 = radius * radius
    qkeys = np.floor(q / radius).astype(np.int64)
    for qi in range(q.shape[0]):
        kx, ky, kz = qkeys[qi]
        candidates: list[int] = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    candidates.extend(buckets.get((kx + dx, ky + dy, kz + dz), ()))
        if not candidates:
            continue
        cand = np.sort(np.asarray(candidates, dtype=np.intp))
        d2 = ((s[cand] - q[qi]) ** 2).sum(axis=1)
        mask[qi, cand[d2 <= r2]] = True
    return mask


def nearest_index(query_positions: np.ndarray, support_positions: np.ndarray) -> np.ndarray:
    """Index of the nearest support point for each query (ties: lowest index)."""
    q = np.asarray(query_positions, dtype=np.float64)
    s = np.asarray(support_positions, dtype=np.float64)
    d2 = ((q[:, None, :] - s[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def kp_conv(
    support_positions: np.ndarray,
    support_features: Tensor,
    query_positions: np.ndarray,
    neighbor_mask: np.ndarray,
    offsets: np.ndarray,
    weights: list[Tensor],
    sigma: float,
) -> Tensor:
    """Kernel-point convolution.

    For each query q: sum over its neighbors n and kernel points k of
    max(0, 1 - |p_n - (q + offset_k)| / sigma) * (f_n W_k). Influence factors
    depend only on geometry, so they enter the graph as constants.
    """
    out: Tensor | None = None
    for k, w in enumerate(weights):
        shifted = query_positions + offsets[k][None, :]
        d = np.sqrt(
            ((support_positions[None, :, :] - shifted[:, None, :]) ** 2).sum(axis=2)
        )
        influence = np.maximum(0.0, 1.0 - d / sigma) * neighbor_mask
        term = matmul(Tensor(influence), matmul(support_features, w))
        out = term if out is None else add(out, term)
    assert out is not None
    return out


def _kp_weight_names(prefix: str, count: int) -> list[str]:
    return [f"{prefix}.w{k}" for k in range(count)]


def build_backbone_params(
    cfg: BackboneConfig, num_classes: int, rng: np.random.Generator
) -> ParamStore:
    """Initialize all backbone parameters into a fresh store.

    Kernel weights are scaled down for the unnormalized neighbor sum so early
    activations stay O(1) at typical desk-scale neighborhood sizes.
    """
    store = ParamStore()

    def unary(name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        std = math.sqrt(2.0 / fan_in)
        store.add(f"{name}.w", parameter(rng.normal(scale=std, size=(fan_in, fan_out)), f"{name}.w"))
        if bias:
            store.add(f"{name}.b", parameter(np.zeros(fan_out), f"{name}.b"))

    def kp_weights(prefix: str, fan_in: int, fan_out: int) -> None:
        std = math.sqrt(2.0 / (fan_in * cfg.kernel_points * 6.0))
        for name in _kp_weight_names(prefix, cfg.kernel_points):
            store.add(name, parameter(rng.normal(scale=std, size=(fan_in, fan_out)), name))

    for level in range(cfg.levels):
        # Strided convs between levels already map widths[l-1] -> widths[l].
        in_w = 4 if level == 0 else cfg.widths[level]  # level 0: constant one + RGB
        out_w = cfg.widths[level]
        mid = max(out_w // 2, 2)
        unary(f"enc{level}.ua", in_w, mid)
        kp_weights(f"enc{level}.kp", mid, mid)
        unary(f"enc{level}.ub", mid, out_w)
        if in_w != out_w:
            unary(f"enc{level}.skip", in_w, out_w, bias=False)
        if level + 1 < cfg.levels:
            kp_weights(f"down{level}", out_w, cfg.widths[level + 1])
    if cfg.levels >= 2:
        unary("hook", cfg.widths[-1] + cfg.widths[-2], cfg.hook_width)
        for t in range(cfg.levels - 3, -1, -1):
            unary(f"up{t}", cfg.hook_width + cfg.widths[t], cfg.hook_width)
        unary("head", cfg.hook_width, num_classes)
    return store


def input_features(colors: np.ndarray, requires_grad: bool = False) -> Tensor:
    """Network input per point: a constant one plus RGB."""
    feats = np.concatenate([np.ones((colors.shape[0], 1)), colors], axis=1)
    return Tensor(feats, requires_grad=requires_grad)


def _block(
    store: ParamStore,
    cfg: BackboneConfig,
    level: int,
    feats: Tensor,
    positions: np.ndarray,
    neighbor_mask: np.ndarray,
    offsets: np.ndarray,
    sigma: float,
) -> Tensor:
    """Bottleneck residual block at one level."""
    slope = cfg.negative_slope
    h = leaky_relu(add_bias(matmul(feats, store[f"enc{level}.ua.w"]), store[f"enc{level}.ua.b"]), slope)
    kp_w = [store[name] for name in _kp_weight_names(f"enc{level}.kp", cfg.kernel_points)]
    h = leaky_relu(kp_conv(positions, h, positions, neighbor_mask, offsets, kp_w, sigma), slope)
    h = add_bias(matmul(h, store[f"enc{level}.ub.w"]), store[f"enc{level}.ub.b"])
    if f"enc{level}.skip.w" in store:
        shortcut = matmul(feats, store[f"enc{level}.skip.w"])
    else:
        shortcut = feats
    return leaky_relu(add(h, shortcut), slope)


def encode(
    positions: np.ndarray,
    colors: np.ndarray,
    store: ParamStore,
    cfg: BackboneConfig,
    feats_in: Tensor | None = None,
) -> EncodeResult:
    """Run the encoder over one crop; one FeatureMap per level.

    Voxel keys for the level pyramid are taken relative to the crop centroid
    so the whole network is translation invariant. A level that no longer
    reduces the point count is kept as a trivial level (parameter shapes stay
    fixed); this is the graceful floor for very small crops.
    """
    positions = np.asarray(positions, dtype=np.float64)
    centroid = positions.mean(axis=0)
    local = positions - centroid

    level_positions = [positions]
    level_local = [local]
    for level in range(1, cfg.levels):
        smap = grid_subsample(level_local[-1], cfg.subsample_cell(level))
        if smap.coarse_positions.shape[0] == level_local[-1].shape[0]:
            log.debug(
                "level %d subsampling did not reduce %d points",
                level,
                level_local[-1].shape[0],
            )
        level_local.append(smap.coarse_positions)
        level_positions.append(smap.coarse_positions + centroid)

    if feats_in is None:
        feats_in = input_features(colors)
    feats = feats_in
    maps: list[FeatureMap] = []
    for level in range(cfg.levels):
        radius = cfg.conv_radius(level)
        offsets = kernel_offsets(cfg.kernel_points, KERNEL_RADIUS_RATIO * radius)
        sigma = INFLUENCE_RATIO * radius
        mask = radius_neighbors(level_local[level], level_local[level], radius)
        feats = _block(store, cfg, level, feats, level_local[level], mask, offsets, sigma)
        maps.append(FeatureMap(level_positions[level], feats, level))
        if level + 1 < cfg.levels:
            radius_dn = cfg.conv_radius(level + 1)
            offsets_dn = kernel_offsets(cfg.kernel_points, KERNEL_RADIUS_RATIO * radius_dn)
            sigma_dn = INFLUENCE_RATIO * radius_dn
            mask_dn = radius_neighbors(level_local[level + 1], level_local[level], radius_dn)
            kp_w = [store[name] for name in _kp_weight_names(f"down{level}", cfg.kernel_points)]
            feats = leaky_relu(
                kp_conv(
                    level_local[level], feats, level_local[level + 1], mask_dn, offsets_dn, kp_w, sigma_dn
                ),
                cfg.negative_slope,
            )
    return EncodeResult(maps=maps, input_features=feats_in)


def decode_to_hook(enc: EncodeResult, store: ParamStore, cfg: BackboneConfig) -> FeatureMap:
    """First upsampling step: nearest-neighbor upsample of the deepest map,
    skip concatenation, unary convolution. Output feeds the reallocators."""
    hook_level = cfg.hook_level
    deep = enc.maps[-1]
    target = enc.maps[hook_level]
    idx = nearest_index(target.positions, deep.positions)
    up = gather_rows(deep.features, idx)
    cat = concat_cols(up, target.features)
    feats = leaky_relu(add_bias(matmul(cat, store["hook.w"]), store["hook.b"]), cfg.negative_slope)
    return FeatureMap(target.positions, feats, hook_level)


def decode_from_hook(
    hook: FeatureMap, enc: EncodeResult, store: ParamStore, cfg: BackboneConfig
) -> Tensor:
    """Decode hook-level features to per-point class scores at full crop
    resolution. Works for any hook feature source (original or reallocated);
    upsample targets come from the stored encoder pyramid."""
    current_feats = hook.features
    current_positions = hook.positions
    for t in range(cfg.hook_level - 1, -1, -1):
        target = enc.maps[t]
        idx = nearest_index(target.positions, current_positions)
        up = gather_rows(current_feats, idx)
        cat = concat_cols(up, target.features)
        current_feats = leaky_relu(
            add_bias(matmul(cat, store[f"up{t}.w"]), store[f"up{t}.b"]), cfg.negative_slope
        )
        current_positions = target.positions
    return add_bias(matmul(current_feats, store["head.w"]), store["head.b"])


def forward_logits(
    crop: PointCloud, store: ParamStore, cfg: BackboneConfig
) -> tuple[Tensor, FeatureMap, EncodeResult]:
    """Full basic-branch forward pass for one crop."""
    enc = encode(crop.positions, crop.colors, store, cfg)
    hook = decode_to_hook(enc, store, cfg)
    logits = decode_from_hook(hook, enc, store, cfg)
    return logits, hook, enc
