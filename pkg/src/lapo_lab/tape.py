"""Reverse-mode automatic differentiation over dense rank-1/2/3 arrays.

Features:
- Eager forward: every ``record`` computes and stores the node value at once.
- The node list is append-only, so insertion order is a topological order and
  ``backward`` is a single reverse sweep.
- Values are stored as float32 by default; reductions and matmuls accumulate in
  float64. A float64 tape is used for finite-difference checks.
- Any NaN/Inf output raises :class:`NumericError` at record time.

Op kinds and their attributes:

=============  =========================================================
matmul         ``trans_b``: multiply by the transpose of the last two axes;
               a rank-2 left operand broadcasts over a rank-3 right one
add, mul, div  numpy broadcasting; gradients are summed back to shape
scale          ``factor``
clip           ``lo``, ``hi``; gradient passes where lo <= x <= hi
minimum        elementwise; ties send the gradient to the first operand
gather_rows    ``index``: integer positions taken along ``axis`` (default 0)
reshape        ``shape``
concat         ``axis``
sum, mean      ``axis`` (None for all)
layer_norm     ``eps``; normalizes the last axis, no affine part
=============  =========================================================
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonDeterminismError, NumericError, ShapeError

logger = logging.getLogger(__name__)

GELU_C = math.sqrt(2.0 / math.pi)
LAYER_NORM_EPS = 1e-5
MAX_RANK = 3


@dataclass
class Node:
    kind: str
    operands: Tuple[int, ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    saved: Any = None
    name: Optional[str] = None


# ----------------------------- helpers -----------------------------


def _f64(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ----------------------------- forward rules -----------------------------
# Each rule takes (operand values, attrs) and returns (output, saved).


def _fwd_matmul(vals, attrs):
    a, b = vals
    trans_b = attrs.get("trans_b", False)
    bm = _swap(b) if trans_b else b
    ok = a.ndim in (1, 2, 3) and b.ndim in (2, 3) and a.shape[-1] == bm.shape[-2]
    if ok and b.ndim == 3:
        ok = a.ndim == 2 or (a.ndim == 3 and a.shape[0] == b.shape[0])
    if not ok:
        suffix = " (trans_b)" if trans_b else ""
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}{suffix}")
    return np.matmul(_f64(a), _f64(bm)), None


def _fwd_add(vals, attrs):
    _broadcast_shape("add", *vals)
    return _f64(vals[0]) + _f64(vals[1]), None


def _fwd_mul(vals, attrs):
    _broadcast_shape("mul", *vals)
    return _f64(vals[0]) * _f64(vals[1]), None


def _fwd_div(vals, attrs):
    _broadcast_shape("div", *vals)
    return _f64(vals[0]) / _f64(vals[1]), None


def _fwd_scale(vals, attrs):
    return _f64(vals[0]) * float(attrs["factor"]), None


def _fwd_tanh(vals, attrs):
    out = np.tanh(_f64(vals[0]))
    return out, out


def _fwd_gelu(vals, attrs):
    x = _f64(vals[0])
    inner = np.tanh(GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + inner), inner


def _softmax64(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_softmax(vals, attrs):
    out = _softmax64(_f64(vals[0]))
    return out, out


def _fwd_log_softmax(vals, attrs):
    x = _f64(vals[0])
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return out, np.exp(out)


def _fwd_log_sigmoid(vals, attrs):
    x = _f64(vals[0])
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x))), None


def _fwd_gather_rows(vals, attrs):
    x = vals[0]
    index = np.asarray(attrs["index"], dtype=np.int64)
    axis = attrs.get("axis", 0)
    if index.ndim != 1:
        raise ShapeError(f"gather_rows: index must be rank 1, got shape {index.shape}")
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"gather_rows: axis {axis} invalid for shape {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape} on axis {axis}")
    return np.take(_f64(x), index, axis=axis), index


def _fwd_reshape(vals, attrs):
    x = vals[0]
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return _f64(x).reshape(shape), None


def _fwd_layer_norm(vals, attrs):
    x = _f64(vals[0])
    eps = float(attrs.get("eps", LAYER_NORM_EPS))
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return xhat, (xhat, inv_std)


def _fwd_concat(vals, attrs):
    axis = attrs.get("axis", 0)
    first = vals[0]
    for v in vals[1:]:
        other = [s for i, s in enumerate(v.shape) if i != axis % v.ndim]
        base = [s for i, s in enumerate(first.shape) if i != axis % first.ndim]
        if v.ndim != first.ndim or other != base:
            raise ShapeError(f"concat: incompatible shapes {first.shape} and {v.shape} on axis {axis}")
    out = np.concatenate([_f64(v) for v in vals], axis=axis)
    return out, [v.shape[axis] for v in vals]


def _fwd_sum(vals, attrs):
    return _f64(vals[0]).sum(axis=attrs.get("axis")), None


def _fwd_mean(vals, attrs):
    return _f64(vals[0]).mean(axis=attrs.get("axis")), None


def _fwd_mse(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} and {b.shape}")
    return np.mean((_f64(a) - _f64(b)) ** 2), None


def _fwd_square(vals, attrs):
    return _f64(vals[0]) ** 2, None


def _fwd_exp(vals, attrs):
    out = np.exp(_f64(vals[0]))
    return out, out


def _fwd_neg(vals, attrs):
    return -_f64(vals[0]), None


def _fwd_sqrt(vals, attrs):
    x = _f64(vals[0])
    if np.any(x < 0):
        raise NumericError("sqrt: negative operand")
    out = np.sqrt(x)
    return out, out


def _fwd_clip(vals, attrs):
    return np.clip(_f64(vals[0]), attrs["lo"], attrs["hi"]), None


def _fwd_minimum(vals, attrs):
    _broadcast_shape("minimum", *vals)
    return np.minimum(_f64(vals[0]), _f64(vals[1])), None


# ----------------------------- backward rules -----------------------------
# Each rule takes (upstream grad, operand values, output, saved, attrs) and
# returns one gradient (or None) per operand, all in float64.


def _bwd_matmul(g, vals, out, saved, attrs):
    a, b = _f64(vals[0]), _f64(vals[1])
    trans_b = attrs.get("trans_b", False)
    bm = _swap(b) if trans_b else b
    if a.ndim == 1:
        ga = bm @ g
        gbm = np.outer(a, g)
    elif a.ndim == 2 and b.ndim == 3:
        ga = (g @ _swap(bm)).sum(axis=0)
        gbm = a.T @ g
    else:
        ga = g @ _swap(bm)
        if b.ndim == 3:
            gbm = _swap(a) @ g
        else:
            gbm = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    gb = _swap(gbm) if trans_b else gbm
    return [ga, gb]


def _bwd_add(g, vals, out, saved, attrs):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _bwd_mul(g, vals, out, saved, attrs):
    a, b = _f64(vals[0]), _f64(vals[1])
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _bwd_div(g, vals, out, saved, attrs):
    a, b = _f64(vals[0]), _f64(vals[1])
    return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]


def _bwd_scale(g, vals, out, saved, attrs):
    return [g * float(attrs["factor"])]


def _bwd_tanh(g, vals, out, saved, attrs):
    return [g * (1.0 - saved**2)]


def _bwd_gelu(g, vals, out, saved, attrs):
    x = _f64(vals[0])
    inner = saved
    d_inner = (1.0 - inner**2) * GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return [g * (0.5 * (1.0 + inner) + 0.5 * x * d_inner)]


def _bwd_softmax(g, vals, out, saved, attrs):
    s = saved
    return [s * (g - (g * s).sum(axis=-1, keepdims=True))]


def _bwd_log_softmax(g, vals, out, saved, attrs):
    return [g - saved * g.sum(axis=-1, keepdims=True)]


def _bwd_log_sigmoid(g, vals, out, saved, attrs):
    x = _f64(vals[0])
    sig_neg = np.exp(np.minimum(-x, 0.0)) / (1.0 + np.exp(-np.abs(x)))
    return [g * sig_neg]


def _bwd_gather_rows(g, vals, out, saved, attrs):
    axis = attrs.get("axis", 0)
    gx = np.zeros(vals[0].shape, dtype=np.float64)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, saved, np.moveaxis(g, axis, 0))
    return [gx]


def _bwd_reshape(g, vals, out, saved, attrs):
    return [g.reshape(vals[0].shape)]


def _bwd_layer_norm(g, vals, out, saved, attrs):
    xhat, inv_std = saved
    n = xhat.shape[-1]
    gx = (inv_std / n) * (
        n * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True)
    )
    return [gx]


def _bwd_concat(g, vals, out, saved, attrs):
    axis = attrs.get("axis", 0)
    splits = np.cumsum(saved)[:-1]
    return list(np.split(g, splits, axis=axis))


def _bwd_sum(g, vals, out, saved, attrs):
    shape = vals[0].shape
    axis = attrs.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, shape).copy()]


def _bwd_mean(g, vals, out, saved, attrs):
    shape = vals[0].shape
    axis = attrs.get("axis")
    count = int(np.prod(shape)) if axis is None else shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g / count, shape).copy()]


def _bwd_mse(g, vals, out, saved, attrs):
    diff = _f64(vals[0]) - _f64(vals[1])
    ga = g * 2.0 * diff / diff.size
    return [ga, -ga]


def _bwd_square(g, vals, out, saved, attrs):
    return [g * 2.0 * _f64(vals[0])]


def _bwd_exp(g, vals, out, saved, attrs):
    return [g * saved]


def _bwd_neg(g, vals, out, saved, attrs):
    return [-g]


def _bwd_sqrt(g, vals, out, saved, attrs):
    return [g / (2.0 * saved)]


def _bwd_clip(g, vals, out, saved, attrs):
    x = _f64(vals[0])
    inside = (x >= attrs["lo"]) & (x <= attrs["hi"])
    return [g * inside]


def _bwd_minimum(g, vals, out, saved, attrs):
    a, b = _f64(vals[0]), _f64(vals[1])
    shape = np.broadcast_shapes(a.shape, b.shape)
    first = np.broadcast_to(a <= b, shape)
    return [_unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)]


_RULES: Dict[str, Tuple[Callable, Callable, int]] = {
    "matmul": (_fwd_matmul, _bwd_matmul, 2),
    "add": (_fwd_add, _bwd_add, 2),
    "mul": (_fwd_mul, _bwd_mul, 2),
    "div": (_fwd_div, _bwd_div, 2),
    "scale": (_fwd_scale, _bwd_scale, 1),
    "tanh": (_fwd_tanh, _bwd_tanh, 1),
    "gelu": (_fwd_gelu, _bwd_gelu, 1),
    "softmax": (_fwd_softmax, _bwd_softmax, 1),
    "log_softmax": (_fwd_log_softmax, _bwd_log_softmax, 1),
    "log_sigmoid": (_fwd_log_sigmoid, _bwd_log_sigmoid, 1),
    "gather_rows": (_fwd_gather_rows, _bwd_gather_rows, 1),
    "reshape": (_fwd_reshape, _bwd_reshape, 1),
    "layer_norm": (_fwd_layer_norm, _bwd_layer_norm, 1),
    "concat": (_fwd_concat, _bwd_concat, -1),
    "sum": (_fwd_sum, _bwd_sum, 1),
    "mean": (_fwd_mean, _bwd_mean, 1),
    "mse": (_fwd_mse, _bwd_mse, 2),
    "square": (_fwd_square, _bwd_square, 1),
    "exp": (_fwd_exp, _bwd_exp, 1),
    "neg": (_fwd_neg, _bwd_neg, 1),
    "sqrt": (_fwd_sqrt, _bwd_sqrt, 1),
    "clip": (_fwd_clip, _bwd_clip, 1),
    "minimum": (_fwd_minimum, _bwd_minimum, 2),
}

OP_KINDS = tuple(_RULES)


class GradientMap(Mapping):
    """Gradients by node id; nodes the loss does not reach map to zeros."""

    def __init__(self, tape: "Tape", grads: Dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node_id: int) -> np.ndarray:
        if not 0 <= node_id < len(self._tape):
            raise KeyError(node_id)
        grad = self._grads.get(node_id)
        if grad is None:
            return np.zeros_like(self._tape.value(node_id))
        return grad

    def __iter__(self) -> Iterator[int]:
        return iter(range(len(self._tape)))

    def __len__(self) -> int:
        return len(self._tape)

    def reached(self, node_id: int) -> bool:
        return node_id in self._grads


class Tape:
    """Append-only record of eagerly evaluated ops."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def shape(self, node_id: int) -> Tuple[int, ...]:
        return self.nodes[node_id].value.shape

    def _check_finite(self, kind: str, value: np.ndarray) -> None:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{kind} produced non-finite values (shape {value.shape})")

    def leaf(self, value, name: Optional[str] = None) -> int:
        arr = np.array(value, dtype=self.dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"leaf: rank {arr.ndim} exceeds {MAX_RANK} for shape {arr.shape}")
        self._check_finite("leaf", arr)
        self.nodes.append(Node("leaf", (), arr, name=name))
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        return self.leaf(value, name="const")

    def record(self, kind: str, operands: Sequence[int], **attrs) -> int:
        if kind not in _RULES:
            raise ValueError(f"Unknown op kind: {kind}")
        forward, _, arity = _RULES[kind]
        operands = tuple(int(i) for i in operands)
        if arity >= 0 and len(operands) != arity:
            raise ShapeError(f"{kind}: expected {arity} operands, got {len(operands)}")
        if not operands:
            raise ShapeError(f"{kind}: no operands")
        for i in operands:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{kind}: operand {i} is not an earlier node")
        vals = [self.nodes[i].value for i in operands]
        out, saved = forward(vals, attrs)
        out = np.asarray(out)
        if out.ndim > MAX_RANK:
            raise ShapeError(f"{kind}: output rank {out.ndim} exceeds {MAX_RANK}")
        self._check_finite(kind, out)
        self.nodes.append(Node(kind, operands, out.astype(self.dtype), attrs, saved))
        return len(self.nodes) - 1

    def backward(self, loss: int) -> GradientMap:
        root = self.nodes[loss]
        if root.value.size != 1 or root.value.ndim > 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {root.value.shape}")
        grads: Dict[int, np.ndarray] = {loss: np.ones(root.value.shape, dtype=np.float64)}
        for idx in range(loss, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or not node.operands:
                continue
            backward = _RULES[node.kind][1]
            vals = [self.nodes[i].value for i in node.operands]
            parts = backward(g, vals, node.value, node.saved, node.attrs)
            for operand, part in zip(node.operands, parts):
                if part is None:
                    continue
                part = np.asarray(part, dtype=np.float64)
                prev = grads.get(operand)
                grads[operand] = part if prev is None else prev + part
        cast = {i: g.astype(self.dtype) for i, g in grads.items()}
        return GradientMap(self, cast)

    # convenience wrappers, one per op kind

    def matmul(self, a: int, b: int, trans_b: bool = False) -> int:
        return self.record("matmul", [a, b], trans_b=trans_b)

    def add(self, a: int, b: int) -> int:
        return self.record("add", [a, b])

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.neg(b))

    def mul(self, a: int, b: int) -> int:
        return self.record("mul", [a, b])

    def div(self, a: int, b: int) -> int:
        return self.record("div", [a, b])

    def scale(self, a: int, factor: float) -> int:
        return self.record("scale", [a], factor=float(factor))

    def tanh(self, a: int) -> int:
        return self.record("tanh", [a])

    def gelu(self, a: int) -> int:
        return self.record("gelu", [a])

    def softmax(self, a: int) -> int:
        return self.record("softmax", [a])

    def log_softmax(self, a: int) -> int:
        return self.record("log_softmax", [a])

    def log_sigmoid(self, a: int) -> int:
        return self.record("log_sigmoid", [a])

    def gather_rows(self, a: int, index, axis: int = 0) -> int:
        return self.record("gather_rows", [a], index=np.asarray(index, dtype=np.int64), axis=axis)

    def reshape(self, a: int, shape: Sequence[int]) -> int:
        return self.record("reshape", [a], shape=tuple(int(s) for s in shape))

    def layer_norm(self, a: int, eps: float = LAYER_NORM_EPS) -> int:
        return self.record("layer_norm", [a], eps=eps)

    def concat(self, parts: Sequence[int], axis: int = 0) -> int:
        if len(parts) == 1:
            return parts[0]
        return self.record("concat", parts, axis=axis)

    def sum(self, a: int, axis: Optional[int] = None) -> int:
        return self.record("sum", [a], axis=axis)

    def mean(self, a: int, axis: Optional[int] = None) -> int:
        return self.record("mean", [a], axis=axis)

    def mse(self, a: int, b: int) -> int:
        return self.record("mse", [a, b])

    def square(self, a: int) -> int:
        return self.record("square", [a])

    def exp(self, a: int) -> int:
        return self.record("exp", [a])

    def neg(self, a: int) -> int:
        return self.record("neg", [a])

    def sqrt(self, a: int) -> int:
        return self.record("sqrt", [a])

    def clip(self, a: int, lo: float, hi: float) -> int:
        return self.record("clip", [a], lo=float(lo), hi=float(hi))

    def minimum(self, a: int, b: int) -> int:
        return self.record("minimum", [a, b])


def finite_diff_check(
    fn: Callable[[Tape, Dict[str, int]], int],
    params: Mapping,
    h: float = 1e-4,
    n_coords: int = 50,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn(tape, leaves)`` records a scalar loss on ``tape`` using the leaf node
    ids in ``leaves`` (one per entry of ``params``) and returns its node id.
    Everything runs on float64 tapes. Returns the maximum over ``n_coords``
    sampled coordinates of ``|analytic - numeric| / max(floor, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {name: np.array(v, dtype=np.float64) for name, v in params.items()}

    def evaluate(values):
        tape = Tape(dtype=np.float64)
        leaves = {name: tape.leaf(v, name=name) for name, v in values.items()}
        loss = fn(tape, leaves)
        return tape, leaves, loss

    def scalar(tape: Tape, node: int) -> float:
        return float(np.asarray(tape.value(node)).reshape(()))

    tape, leaves, loss = evaluate(base)
    first = scalar(tape, loss)
    again, _, loss_again = evaluate(base)
    second = scalar(again, loss_again)
    if first != second:
        raise NonDeterminismError(f"fn returned {first!r} then {second!r} for identical params")
    grads = tape.backward(loss)

    names = sorted(base)
    sizes = np.array([base[n].size for n in names], dtype=np.int64)
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.sort(picks):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        local = int(flat - offsets[slot])
        shifted = []
        for sign in (1.0, -1.0):
            arr = base[name].copy()
            arr.flat[local] += sign * h
            t, _, node = evaluate({**base, name: arr})
            shifted.append(scalar(t, node))
        numeric = (shifted[0] - shifted[1]) / (2.0 * h)
        analytic = float(grads[leaves[name]].flat[local])
        err = abs(analytic - numeric) / max(floor, abs(numeric))
        logger.debug("fd %s[%d]: analytic=%.6g numeric=%.6g err=%.3g", name, local, analytic, numeric, err)
        worst = max(worst, err)
    return worst
