"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation returns a new `Tensor` holding its value and, when any input
requires gradients, a closure that propagates vector-Jacobian products back to
its parents. `backward` walks the recorded graph once in reverse topological
order. Desk scale by design: plain numpy float64 arrays, no views, no devices.
"""

from __future__ import annotations

from collections import Counter
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "NonFiniteError",
    "ParamStore",
    "SGDMomentum",
    "ShapeError",
    "Tensor",
    "add",
    "add_bias",
    "backward",
    "concat_cols",
    "detach",
    "frobenius_sq_mean",
    "gather_rows",
    "leaky_relu",
    "masked_softmax_cross_entropy",
    "matmul",
    "mul",
    "parameter",
    "row_softmax",
    "scale",
    "sub",
    "sum_all",
    "transpose",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf, which is an error state here."""


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A float64 array plus the tape node that produced it.

    Leaf tensors are either constants (requires_grad False, never on the tape)
    or parameters. Gradients materialize lazily during `backward`; `grad`
    reads as zeros until then.
    """

    __slots__ = ("data", "requires_grad", "name", "_grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(
                f"non-finite values in tensor {name or '<anon>'} (shape {self.data.shape})"
            )
        self.requires_grad = requires_grad
        self.name = name
        self._grad: np.ndarray | None = None
        # Only grad-requiring parents matter for the backward walk.
        self._parents = tuple(p for p in _parents if p.requires_grad)
        self._vjp = _vjp if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def clear_grad(self) -> None:
        self._grad = None

    def _accumulate(self, delta: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if delta.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {delta.shape} does not match value shape {self.data.shape}"
            )
        if self._grad is None:
            self._grad = delta.copy()
        else:
            self._grad += delta

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # Sugar for the handful of spots where infix reads better.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, s: float) -> "Tensor":
        return scale(self, s)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unary(a: Tensor, out: np.ndarray, vjp: Callable[[np.ndarray], None]) -> Tensor:
    return Tensor(out, requires_grad=a.requires_grad, _parents=(a,), _vjp=vjp)


def _binary(a: Tensor, b: Tensor, out: np.ndarray, vjp) -> Tensor:
    rg = a.requires_grad or b.requires_grad
    return Tensor(out, requires_grad=rg, _parents=(a, b), _vjp=vjp)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(g)

    return _binary(a, b, a.data + b.data, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(-g)

    return _binary(a, b, a.data - b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _require_same_shape(a, b, "mul")

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _binary(a, b, a.data * b.data, vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g * s)

    return _unary(a, a.data * s, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _binary(a, b, a.data @ b.data, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expects rank 2, got rank {a.data.ndim}")

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g.T)

    return _unary(a, a.data.T.copy(), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expects rank 2, got rank {a.data.ndim}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index list must be one-dimensional")
    n = a.shape[0]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        raise IndexError(f"gather_rows: index {int(idx[bad][0])} out of range [0, {n})")

    def vjp(g: np.ndarray) -> None:
        delta = np.zeros_like(a.data)
        np.add.at(delta, idx, g)
        a._accumulate(delta)

    return _unary(a, a.data[idx].copy(), vjp)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two row-aligned matrices along the feature axis."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    ka = a.shape[1]

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g[:, :ka])
        b._accumulate(g[:, ka:])

    return _binary(a, b, np.concatenate([a.data, b.data], axis=1), vjp)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a per-column bias vector to every row of a matrix."""
    if a.data.ndim != 2 or bias.data.ndim != 1 or bias.shape[0] != a.shape[1]:
        raise ShapeError(f"add_bias: incompatible shapes {a.shape} and {bias.shape}")

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g)
        bias._accumulate(g.sum(axis=0))

    return _binary(a, bias, a.data + bias.data[None, :], vjp)


def leaky_relu(a: Tensor, negative_slope: float = 0.1) -> Tensor:
    # Subgradient at exactly 0 takes the negative-slope branch.
    slope = float(negative_slope)
    factor = np.where(a.data > 0.0, 1.0, slope)

    def vjp(g: np.ndarray) -> None:
        a._accumulate(g * factor)

    return _unary(a, a.data * factor, vjp)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax each row, stabilized by per-row max subtraction."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_softmax: expects rank 2, got rank {a.data.ndim}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=1, keepdims=True)
        a._accumulate(y * (g - inner))

    return _unary(a, y, vjp)


def sum_all(a: Tensor) -> Tensor:
    def vjp(g: np.ndarray) -> None:
        a._accumulate(np.full_like(a.data, float(g)))

    return _unary(a, a.data.sum(), vjp)


def frobenius_sq_mean(a: Tensor, b: Tensor, normalize: bool = True) -> Tensor:
    """Squared Frobenius distance, divided by the element count unless raw mode."""
    _require_same_shape(a, b, "frobenius_sq_mean")
    diff = a.data - b.data
    denom = float(diff.size) if normalize else 1.0
    val = float((diff * diff).sum()) / denom

    def vjp(g: np.ndarray) -> None:
        d = (2.0 / denom) * float(g) * diff
        a._accumulate(d)
        b._accumulate(-d)

    return _binary(a, b, val, vjp)


def masked_softmax_cross_entropy(logits: Tensor, one_hot, mask) -> Tensor:
    """Mean log-softmax cross-entropy over the masked rows.

    `one_hot` and `mask` are label data, not differentiable inputs. Rows with
    mask 0 contribute nothing; if no row is masked the loss is exactly 0 with
    zero gradient.
    """
    y = _as_f64(one_hot.data if isinstance(one_hot, Tensor) else one_hot)
    m = _as_f64(mask.data if isinstance(mask, Tensor) else mask)
    z = logits.data
    if z.ndim != 2 or y.shape != z.shape or m.shape != (z.shape[0],):
        raise ShapeError(
            f"masked_softmax_cross_entropy: logits {z.shape}, one_hot {y.shape}, mask {m.shape}"
        )
    total = m.sum()
    if total == 0.0:
        return Tensor(0.0)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    log_probs = (z - zmax) - np.log(e.sum(axis=1, keepdims=True))
    val = -(m * (y * log_probs).sum(axis=1)).sum() / total

    def vjp(g: np.ndarray) -> None:
        probs = e / e.sum(axis=1, keepdims=True)
        row_y = y.sum(axis=1, keepdims=True)
        delta = (float(g) / total) * m[:, None] * (probs * row_y - y)
        logits._accumulate(delta)

    return _unary(logits, val, vjp)


def detach(a: Tensor) -> Tensor:
    """Copy of the value with the tape cut."""
    return Tensor(a.data.copy())


def backward(root: Tensor) -> None:
    """Propagate d(root)/d(node) to every reachable grad-requiring tensor.

    Root must be scalar. Visits each node exactly once in reverse topological
    order, so shared subexpressions accumulate correctly.
    """
    if root.data.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root._accumulate(np.ones(()))
    for node in reversed(topo):
        if node._vjp is not None and node._grad is not None:
            node._vjp(node._grad)


class ParamStore:
    """Named parameter tensors with instrumented reads.

    Forward code fetches parameters through `__getitem__`, which counts the
    access; this is how inference-path purity is asserted (the basic branch
    must never read the reallocation weights).
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.reads: Counter[str] = Counter()

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        self.reads[name] += 1
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        # Uncounted: used by the optimizer and checkpoint writer, not inference.
        return iter(self._params.items())

    def peek(self, name: str) -> Tensor:
        return self._params[name]

    def read_count(self, prefix: str = "") -> int:
        return sum(c for name, c in self.reads.items() if name.startswith(prefix))

    def reset_reads(self) -> None:
        self.reads.clear()

    def clear_grads(self) -> None:
        for p in self._params.values():
            p.clear_grad()

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, parameter(p.data.copy(), name))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}


class SGDMomentum:
    """Classical momentum: v <- momentum*v + grad; p <- p - lr*v."""

    def __init__(self, learning_rate: float, momentum: float):
        if learning_rate <= 0.0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore) -> None:
        for name, p in params.items():
            g = p._grad if p._grad is not None else np.zeros_like(p.data)
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            elif v.shape != p.data.shape:
                raise ShapeError(
                    f"velocity shape {v.shape} does not match parameter {name!r} {p.data.shape}"
                )
            v = self.momentum * v + g
            self.velocities[name] = v
            new_data = p.data - self.learning_rate * v
            if not np.all(np.isfinite(new_data)):
                raise NonFiniteError(f"parameter {name!r} became non-finite during update")
            p.data = new_data

    def zero_grad(self, params: ParamStore) -> None:
        params.clear_grads()
