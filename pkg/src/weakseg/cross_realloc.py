"""Cross-sample feature reallocation and the stage-one training objective.

Given a crop pair, a learned bilinear form scores every (point of one crop,
point of the other) combination. Row-softmaxing those scores gives each point
of one crop a convex weighting over the other crop's points, and the weighted
feature sums form a reallocated feature map that is decoded with the shared
decoder. Agreement between the original and reallocated decoder outputs is
penalized, which routes gradient, and hence supervision from labeled points,
into the other crop's feature path.

Orientation note: the reallocated map for targets in crop i is
`row_norm @ features_j`, the left multiplication, so every output row is a
convex combination of source rows and the result lives on crop i's points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    detach,
    frobenius_sq_mean,
    gather_rows,
    masked_softmax_cross_entropy,
    matmul,
    parameter,
    row_softmax,
    scale,
    transpose,
)
from .backbone import (
    BackboneConfig,
    EncodeResult,
    FeatureMap,
    decode_from_hook,
    decode_to_hook,
    encode,
)
from .pointcloud import PointCloud, one_hot

CROSS_WEIGHT = "cross_realloc.weight"


def scaled_identity_init(width: int, rng: np.random.Generator) -> np.ndarray:
    """Identity scaled by 1/sqrt(K) plus small uniform noise, so initial
    affinities reflect raw feature similarity."""
    scale_ = 1.0 / np.sqrt(width)
    return scale_ * (np.eye(width) + rng.uniform(-0.01, 0.01, size=(width, width)))


def init_cross_params(store: ParamStore, width: int, rng: np.random.Generator) -> None:
    store.add(CROSS_WEIGHT, parameter(scaled_identity_init(width, rng), CROSS_WEIGHT))


@dataclass
class CrossAffinity:
    raw: Tensor  # (N_i, N_j) bilinear scores
    row_norm: Tensor  # (N_i, N_j), each row a distribution over crop j points
    col_norm: Tensor  # (N_j, N_i), each row a distribution over crop i points


def cross_affinity(feats_i: Tensor, feats_j: Tensor, weight: Tensor) -> CrossAffinity:
    if feats_i.shape[1] != feats_j.shape[1] or weight.shape != (feats_i.shape[1],) * 2:
        raise ValueError(
            f"feature widths disagree: {feats_i.shape}, {feats_j.shape}, weight {weight.shape}"
        )
    raw = matmul(matmul(feats_i, weight), transpose(feats_j))
    return CrossAffinity(
        raw=raw, row_norm=row_softmax(raw), col_norm=row_softmax(transpose(raw))
    )


def reallocate_cross(
    norm_affinity: Tensor, source: FeatureMap, target_positions: np.ndarray
) -> FeatureMap:
    """Rebuild features on target positions as affinity-weighted sums of the
    source crop's features."""
    if norm_affinity.shape != (target_positions.shape[0], len(source)):
        raise ValueError(
            f"affinity {norm_affinity.shape} does not map {len(source)} source points "
            f"onto {target_positions.shape[0]} targets"
        )
    return FeatureMap(target_positions, matmul(norm_affinity, source.features), source.level)


def cr_loss(logits: Tensor, logits_cross: Tensor, normalize: bool = True) -> Tensor:
    """Agreement penalty between original and reallocated decoder outputs."""
    return frobenius_sq_mean(logits, logits_cross, normalize=normalize)


def cap_feature_map(fm: FeatureMap, cap: int, rng: np.random.Generator) -> FeatureMap:
    """Random subsample bounding the quadratic affinity cost; a no-op below cap."""
    if len(fm) <= cap:
        return fm
    keep = np.sort(rng.choice(len(fm), size=cap, replace=False))
    return FeatureMap(fm.positions[keep], gather_rows(fm.features, keep), fm.level)


@dataclass
class Stage1Result:
    loss: Tensor
    terms: dict[str, float]
    enc_i: EncodeResult
    enc_j: EncodeResult
    hook_i: FeatureMap
    hook_j: FeatureMap


def stage1_loss(
    crop_i: PointCloud,
    crop_j: PointCloud,
    store: ParamStore,
    cfg: BackboneConfig,
    *,
    cr_weight: float = 1.0,
    seg_c_weight: float = 0.0,
    stop_gradient_original: bool = False,
    normalize_frobenius: bool = True,
    rng: np.random.Generator | None = None,
    feats_in_i: Tensor | None = None,
    feats_in_j: Tensor | None = None,
) -> Stage1Result:
    """Both crops' masked segmentation losses plus the bidirectional agreement
    terms. The reallocated branches carry no segmentation loss unless the
    ablation weight seg_c_weight is enabled."""
    num_classes = crop_i.num_classes
    y_i, m_i = one_hot(crop_i.labels, num_classes), crop_i.weak_mask.astype(np.float64)
    y_j, m_j = one_hot(crop_j.labels, num_classes), crop_j.weak_mask.astype(np.float64)

    enc_i = encode(crop_i.positions, crop_i.colors, store, cfg, feats_in=feats_in_i)
    enc_j = encode(crop_j.positions, crop_j.colors, store, cfg, feats_in=feats_in_j)
    hook_i = decode_to_hook(enc_i, store, cfg)
    hook_j = decode_to_hook(enc_j, store, cfg)
    logits_i = decode_from_hook(hook_i, enc_i, store, cfg)
    logits_j = decode_from_hook(hook_j, enc_j, store, cfg)

    seg_i = masked_softmax_cross_entropy(logits_i, y_i, m_i)
    seg_j = masked_softmax_cross_entropy(logits_j, y_j, m_j)
    total = seg_i + seg_j
    terms = {"seg_i": seg_i.item(), "seg_j": seg_j.item(), "cr": 0.0, "seg_c": 0.0}

    if cr_weight > 0.0 or seg_c_weight > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        cap_i = cap_feature_map(hook_i, cfg.hook_cap, rng)
        cap_j = cap_feature_map(hook_j, cfg.hook_cap, rng)
        bundle = cross_affinity(cap_i.features, cap_j.features, store[CROSS_WEIGHT])
        cross_on_i = reallocate_cross(bundle.row_norm, cap_j, cap_i.positions)
        cross_on_j = reallocate_cross(bundle.col_norm, cap_i, cap_j.positions)
        logits_cross_i = decode_from_hook(cross_on_i, enc_i, store, cfg)
        logits_cross_j = decode_from_hook(cross_on_j, enc_j, store, cfg)
        if cr_weight > 0.0:
            anchor_i = detach(logits_i) if stop_gradient_original else logits_i
            anchor_j = detach(logits_j) if stop_gradient_original else logits_j
            cr = cr_loss(anchor_i, logits_cross_i, normalize_frobenius) + cr_loss(
                anchor_j, logits_cross_j, normalize_frobenius
            )
            terms["cr"] = cr.item()
            total = total + scale(cr, cr_weight)
        if seg_c_weight > 0.0:
            seg_c = masked_softmax_cross_entropy(
                logits_cross_i, y_i, m_i
            ) + masked_softmax_cross_entropy(logits_cross_j, y_j, m_j)
            terms["seg_c"] = seg_c.item()
            total = total + scale(seg_c, seg_c_weight)

    terms["total"] = total.item()
    return Stage1Result(total, terms, enc_i, enc_j, hook_i, hook_j)
