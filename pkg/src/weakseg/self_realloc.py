"""Intra-sample feature reallocation and the stage-two training objective.

The same bilinear-affinity construction as the cross-sample module, but within
a single crop: each point's feature is rebuilt as a convex combination of the
crop's own features. Unlike classical self-attention there is no residual
connection; the reallocated map replaces rather than augments, keeping the
activation scale. Because reallocation never imports absent classes, the
reallocated branch also carries its own masked segmentation loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    frobenius_sq_mean,
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
from .cross_realloc import cap_feature_map, scaled_identity_init
from .pointcloud import PointCloud, one_hot

SELF_WEIGHT = "self_realloc.weight"


def init_self_params(store: ParamStore, width: int, rng: np.random.Generator) -> None:
    store.add(SELF_WEIGHT, parameter(scaled_identity_init(width, rng), SELF_WEIGHT))


@dataclass
class SelfAffinity:
    raw: Tensor  # (N, N) bilinear scores
    norm: Tensor  # (N, N) row-stochastic; softmax of the transposed scores


def self_affinity(feats: Tensor, weight: Tensor) -> SelfAffinity:
    if weight.shape != (feats.shape[1],) * 2:
        raise ValueError(f"feature width {feats.shape} does not match weight {weight.shape}")
    raw = matmul(matmul(feats, weight), transpose(feats))
    # The transpose before normalizing is deliberate: the bilinear form is not
    # symmetric, and weights for a target point come from scores with the
    # target in the second slot.
    return SelfAffinity(raw=raw, norm=row_softmax(transpose(raw)))


def reallocate_self(norm_affinity: Tensor, fm: FeatureMap) -> FeatureMap:
    """Warp the map onto itself: a pure convex recombination, no residual add."""
    if norm_affinity.shape != (len(fm), len(fm)):
        raise ValueError(
            f"affinity {norm_affinity.shape} does not match feature map of {len(fm)} points"
        )
    return FeatureMap(fm.positions, matmul(norm_affinity, fm.features), fm.level)


def sr_loss(logits_warped: Tensor, logits: Tensor, normalize: bool = True) -> Tensor:
    """Agreement penalty between warped-branch and original decoder outputs."""
    return frobenius_sq_mean(logits_warped, logits, normalize=normalize)


@dataclass
class Stage2Result:
    loss: Tensor
    terms: dict[str, float]
    enc: EncodeResult
    hook: FeatureMap


def stage2_loss(
    crop: PointCloud,
    store: ParamStore,
    cfg: BackboneConfig,
    *,
    sr_weight: float = 1.0,
    seg_s_weight: float = 1.0,
    normalize_frobenius: bool = True,
    rng: np.random.Generator | None = None,
    feats_in: Tensor | None = None,
    identity_affinity: bool = False,
) -> Stage2Result:
    """Masked segmentation loss on both branches plus the agreement term.

    `identity_affinity` injects an identity weighting instead of the learned
    one, pinning the warped branch to the original; test instrumentation only.
    """
    y = one_hot(crop.labels, crop.num_classes)
    m = crop.weak_mask.astype(np.float64)

    enc = encode(crop.positions, crop.colors, store, cfg, feats_in=feats_in)
    hook = decode_to_hook(enc, store, cfg)
    logits = decode_from_hook(hook, enc, store, cfg)

    seg = masked_softmax_cross_entropy(logits, y, m)
    total = seg
    terms = {"seg": seg.item(), "seg_s": 0.0, "sr": 0.0}

    if sr_weight > 0.0 or seg_s_weight > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        capped = cap_feature_map(hook, cfg.hook_cap, rng)
        if identity_affinity:
            norm = Tensor(np.eye(len(capped)))
        else:
            norm = self_affinity(capped.features, store[SELF_WEIGHT]).norm
        warped = reallocate_self(norm, capped)
        logits_warped = decode_from_hook(warped, enc, store, cfg)
        if seg_s_weight > 0.0:
            seg_s = masked_softmax_cross_entropy(logits_warped, y, m)
            terms["seg_s"] = seg_s.item()
            total = total + scale(seg_s, seg_s_weight)
        if sr_weight > 0.0:
            sr = sr_loss(logits_warped, logits, normalize_frobenius)
            terms["sr"] = sr.item()
            total = total + scale(sr, sr_weight)

    terms["total"] = total.item()
    return Stage2Result(total, terms, enc, hook)
