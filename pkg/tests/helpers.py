"""Shared test oracles: central finite differences and gradient comparison."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from weakseg.autodiff import Tensor, backward


def central_diff_grad(
    fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5
) -> np.ndarray:
    """d fn() / d leaf by central differences, perturbing one entry at a time.

    `fn` must rebuild its graph from `leaf.data` on every call.
    """
    base = leaf.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    src = leaf.data.reshape(-1)
    for i in range(src.size):
        orig = src[i]
        src[i] = orig + h
        up = fn().item()
        src[i] = orig - h
        down = fn().item()
        src[i] = orig
        flat[i] = (up - down) / (2.0 * h)
    leaf.data = base
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max-norm relative disagreement between two gradient tensors.

    The denominator is floored: central differences at h=1e-5 carry ~1e-11 of
    absolute roundoff, so comparing gradients far below `floor` in magnitude
    would only measure that noise.
    """
    num = np.abs(a - b).max() if a.size else 0.0
    den = max(
        np.abs(a).max() if a.size else 0.0,
        np.abs(b).max() if b.size else 0.0,
        floor,
    )
    return float(num / den)


def check_grads(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    rtol: float = 1e-6,
    h: float = 1e-5,
) -> None:
    """Assert reverse-mode gradients of fn() match finite differences."""
    for leaf in leaves:
        leaf.clear_grad()
    out = fn()
    backward(out)
    for leaf in leaves:
        fd = central_diff_grad(fn, leaf, h=h)
        err = rel_err(leaf.grad, fd)
        assert err <= rtol, f"gradient mismatch for {leaf.name or '<leaf>'}: rel err {err:.3e}"
