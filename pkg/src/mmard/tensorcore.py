"""Dense float64 tensors with a recorded graph and reverse-mode gradients.

A :class:`Graph` is a tape: every primitive application appends one node, so
node ids are already in topological order and the backward pass is a single
reverse sweep. Leaves either require gradients (parameters, the adversarial
input) or are stop-gradient constants (teacher outputs, detached
distributions); constants never receive or propagate gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "GradientMap",
    "PRIMITIVES",
    "tensor_new",
    "apply",
    "backward",
    "grad_check",
]


class Tensor:
    """Immutable float64 array, optionally attached to a graph node."""

    __slots__ = ("data", "node_id", "graph", "requires_grad")

    def __init__(self, data, *, node_id=None, graph=None, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.node_id = node_id
        self.graph = graph
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={list(self.shape)}{tag}, data={self.data.tolist()!r})"


def tensor_new(shape: Sequence[int], values: Sequence[float]) -> Tensor:
    """Build a detached tensor from a dimension list and row-major values."""
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"dimensions must be positive, got {list(shape)}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if int(np.prod(shape, dtype=np.int64)) != flat.size:
        raise ShapeError(f"shape {list(shape)} needs {int(np.prod(shape))} values, got {flat.size}")
    return Tensor(flat.reshape(shape))


class GradientMap(dict):
    """node_id -> gradient Tensor. Also indexable by the tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().get(key, default)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    attrs: dict
    saved: Any
    requires_grad: bool
    shape: tuple
    value: Any = None
    input_values: tuple = ()


@dataclass
class Graph:
    """Append-only record of primitive applications."""

    nodes: list = field(default_factory=list)
    # per-model parameter leaves, so repeated forwards share one set of leaves
    bindings: dict = field(default_factory=dict)

    def _push(self, node: _Node, value: np.ndarray) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(node)
        return Tensor(value, node_id=node_id, graph=self, requires_grad=node.requires_grad)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        return self._push(_Node("leaf", (), {}, None, requires_grad, data.shape), data)

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def detach(self, t: Tensor) -> Tensor:
        return self.constant(t.data)

    def apply(self, kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
        return apply(self, kind, inputs, attrs)

    # thin conveniences so loss code reads like arithmetic
    def add(self, a, b):
        return apply(self, "add", [a, b])

    def sub(self, a, b):
        return apply(self, "sub", [a, b])

    def mul(self, a, b):
        return apply(self, "elementwise_mul", [a, b])

    def scale(self, a, c: float):
        return apply(self, "scalar_mul", [a], {"c": float(c)})

    def sum(self, a, axis=None):
        return apply(self, "sum", [a], {"axis": axis})

    def mean(self, a, axis=None):
        return apply(self, "mean", [a], {"axis": axis})


# ---------------------------------------------------------------------------
# primitives: forward(xs, attrs) -> (out, saved); backward(g, xs, out, saved, attrs)
# returns one gradient (or None) per input.


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None


def _add_fwd(xs, attrs):
    _check_broadcast("add", *xs)
    return xs[0] + xs[1], None


def _add_bwd(g, xs, out, saved, attrs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _sub_fwd(xs, attrs):
    _check_broadcast("sub", *xs)
    return xs[0] - xs[1], None


def _sub_bwd(g, xs, out, saved, attrs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


def _mul_fwd(xs, attrs):
    _check_broadcast("elementwise_mul", *xs)
    return xs[0] * xs[1], None


def _mul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _scalar_mul_fwd(xs, attrs):
    return xs[0] * attrs["c"], None


def _scalar_mul_bwd(g, xs, out, saved, attrs):
    return [g * attrs["c"]]


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return a @ b, None


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [g @ b.T, a.T @ g]


def _affine_fwd(xs, attrs):
    x, w, b = xs
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"affine: incompatible shapes x={list(x.shape)} w={list(w.shape)} b={list(b.shape)}"
        )
    return x @ w + b, None


def _affine_bwd(g, xs, out, saved, attrs):
    x, w, _ = xs
    return [g @ w.T, x.T @ g, g.sum(axis=0)]


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0.0), None


def _relu_bwd(g, xs, out, saved, attrs):
    # subgradient at 0 is 0
    return [g * (xs[0] > 0.0)]


def _conv_windows(x, k, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return xp.shape, win


def _conv2d_fwd(xs, attrs):
    x, w, b = xs
    stride, padding = attrs.get("stride", 1), attrs.get("padding", 0)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes x={list(x.shape)} w={list(w.shape)}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {list(b.shape)} does not match {w.shape[0]} filters")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {list(x.shape)}")
    padded_shape, win = _conv_windows(x, k, stride, padding)
    out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True) + b[None, :, None, None]
    return out, padded_shape


def _conv2d_bwd(g, xs, out, padded_shape, attrs):
    x, w, _ = xs
    stride, padding = attrs.get("stride", 1), attrs.get("padding", 0)
    k = w.shape[2]
    _, win = _conv_windows(x, k, stride, padding)
    dw = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    dwin = np.einsum("nohw,ocij->nchwij", g, w, optimize=True)
    dxp = np.zeros(padded_shape)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return [dxp, dw, db]


def _flatten_fwd(xs, attrs):
    x = xs[0]
    if x.ndim < 1:
        raise ShapeError("flatten: needs a leading batch axis")
    return x.reshape(x.shape[0], -1), None


def _flatten_bwd(g, xs, out, saved, attrs):
    return [g.reshape(xs[0].shape)]


def _tau(kind, attrs):
    tau = attrs.get("tau", 1.0)
    if not tau > 0:
        raise ShapeError(f"{kind}: temperature must be > 0, got {tau}")
    return tau


def _softmax_fwd(xs, attrs):
    tau = _tau("softmax_tau", attrs)
    z = xs[0] / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return s, None


def _softmax_bwd(g, xs, s, saved, attrs):
    tau = attrs.get("tau", 1.0)
    return [s * (g - (g * s).sum(axis=-1, keepdims=True)) / tau]


def _log_softmax_fwd(xs, attrs):
    tau = _tau("log_softmax_tau", attrs)
    z = xs[0] / tau
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return out, None


def _log_softmax_bwd(g, xs, out, saved, attrs):
    tau = attrs.get("tau", 1.0)
    return [(g - np.exp(out) * g.sum(axis=-1, keepdims=True)) / tau]


def _sum_fwd(xs, attrs):
    return np.sum(xs[0], axis=attrs.get("axis")), None


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _sum_bwd(g, xs, out, saved, attrs):
    return [_expand_reduced(g, xs[0].shape, attrs.get("axis")).copy()]


def _mean_fwd(xs, attrs):
    return np.mean(xs[0], axis=attrs.get("axis")), None


def _mean_bwd(g, xs, out, saved, attrs):
    axis = attrs.get("axis")
    count = xs[0].size if axis is None else xs[0].shape[axis]
    return [_expand_reduced(g, xs[0].shape, axis) / count]


def _log_fwd(xs, attrs):
    if (xs[0] <= 0).any():
        raise NumericError("log: non-positive input")
    return np.log(xs[0]), None


def _log_bwd(g, xs, out, saved, attrs):
    return [g / xs[0]]


def _abs_fwd(xs, attrs):
    return np.abs(xs[0]), None


def _abs_bwd(g, xs, out, saved, attrs):
    return [g * np.sign(xs[0])]


def _square_fwd(xs, attrs):
    return xs[0] * xs[0], None


def _square_bwd(g, xs, out, saved, attrs):
    return [2.0 * xs[0] * g]


def _sqrt_fwd(xs, attrs):
    if (xs[0] < 0).any():
        raise NumericError("sqrt: negative input")
    return np.sqrt(xs[0]), None


def _sqrt_bwd(g, xs, out, saved, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return [g * 0.5 / out]


def _dot_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: needs two equal-length vectors, got {list(a.shape)} and {list(b.shape)}")
    return np.dot(a, b), None


def _dot_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [g * b, g * a]


def _clamp_fwd(xs, attrs):
    lo, hi = attrs.get("lo"), attrs.get("hi")
    if lo is not None and hi is not None and lo > hi:
        raise ShapeError(f"clamp: lo={lo} exceeds hi={hi}")
    return np.clip(xs[0], lo, hi), None


def _clamp_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    lo, hi = attrs.get("lo"), attrs.get("hi")
    mask = np.ones_like(x, dtype=bool)
    if lo is not None:
        mask &= x > lo
    if hi is not None:
        mask &= x < hi
    return [g * mask]


def _normalize_fwd(xs, attrs):
    x = xs[0]
    eps = attrs.get("eps", 1e-12)
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    live = norm >= eps
    out = np.where(live, x / np.where(live, norm, 1.0), 0.0)
    return out, (norm, live)


def _normalize_bwd(g, xs, out, saved, attrs):
    norm, live = saved
    safe = np.where(live, norm, 1.0)
    dx = (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe
    return [np.where(live, dx, 0.0)]


PRIMITIVES: dict[str, tuple[Callable, Callable, int]] = {
    "add": (_add_fwd, _add_bwd, 2),
    "sub": (_sub_fwd, _sub_bwd, 2),
    "scalar_mul": (_scalar_mul_fwd, _scalar_mul_bwd, 1),
    "elementwise_mul": (_mul_fwd, _mul_bwd, 2),
    "matmul": (_matmul_fwd, _matmul_bwd, 2),
    "affine": (_affine_fwd, _affine_bwd, 3),
    "relu": (_relu_fwd, _relu_bwd, 1),
    "conv2d": (_conv2d_fwd, _conv2d_bwd, 3),
    "flatten": (_flatten_fwd, _flatten_bwd, 1),
    "softmax_tau": (_softmax_fwd, _softmax_bwd, 1),
    "log_softmax_tau": (_log_softmax_fwd, _log_softmax_bwd, 1),
    "sum": (_sum_fwd, _sum_bwd, 1),
    "mean": (_mean_fwd, _mean_bwd, 1),
    "log": (_log_fwd, _log_bwd, 1),
    "abs": (_abs_fwd, _abs_bwd, 1),
    "square": (_square_fwd, _square_bwd, 1),
    "sqrt": (_sqrt_fwd, _sqrt_bwd, 1),
    "dot": (_dot_fwd, _dot_bwd, 2),
    "clamp": (_clamp_fwd, _clamp_bwd, 1),
    # unit vectors along the last axis; rows with norm < eps map to zero
    "normalize": (_normalize_fwd, _normalize_bwd, 1),
}

# pure numpy forward, for evaluating frozen models outside any graph
def forward_value(kind: str, xs: Sequence[np.ndarray], attrs: dict | None = None) -> np.ndarray:
    return PRIMITIVES[kind][0](xs, attrs or {})[0]


def apply(graph: Graph, kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Record one primitive application and return its output tensor.

    Inputs that are not attached to ``graph`` yet (plain tensors or arrays) are
    recorded as stop-gradient constants.
    """
    try:
        fwd, _, arity = PRIMITIVES[kind]
    except KeyError:
        raise GraphError(f"unknown primitive kind {kind!r}") from None
    if len(inputs) != arity:
        raise ShapeError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
    attrs = dict(attrs or {})
    ids, values, needs = [], [], False
    for t in inputs:
        if not isinstance(t, Tensor) or t.node_id is None:
            t = graph.constant(t)
        elif t.graph is not graph:
            raise GraphError(f"{kind}: input belongs to a different graph")
        ids.append(t.node_id)
        values.append(t.data)
        needs = needs or t.requires_grad
    # overflow is reported below as a NumericError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out, saved = fwd(values, attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NumericError(f"{kind}: produced non-finite values")
    node = _Node(kind, tuple(ids), attrs, saved, needs, out.shape, out, tuple(values))
    return graph._push(node, out)


def backward(graph: Graph, scalar_node) -> GradientMap:
    """Reverse sweep from a scalar node; returns gradients of every grad-requiring leaf."""
    root = scalar_node.node_id if isinstance(scalar_node, Tensor) else int(scalar_node)
    if not 0 <= root < len(graph.nodes):
        raise GraphError(f"node {root} is not in this graph")
    root_node = graph.nodes[root]
    if root_node.shape not in ((), (1,)):
        raise ShapeError(f"backward needs a scalar root, got shape {list(root_node.shape)}")
    grads: dict[int, np.ndarray] = {root: np.ones(root_node.shape)}
    for nid in range(root, -1, -1):
        node = graph.nodes[nid]
        g = grads.get(nid)
        if g is None or not node.requires_grad or node.kind == "leaf":
            continue
        _, bwd, _ = PRIMITIVES[node.kind]
        in_grads = bwd(g, node.input_values, node.value, node.saved, node.attrs)
        for src, dg in zip(node.inputs, in_grads):
            assert src < nid, "graph is not topologically ordered"
            if dg is None or not graph.nodes[src].requires_grad:
                continue
            if src in grads:
                grads[src] = grads[src] + dg
            else:
                grads[src] = np.asarray(dg, dtype=np.float64)
    result = GradientMap()
    for nid in range(root + 1):
        node = graph.nodes[nid]
        if node.kind == "leaf" and node.requires_grad:
            g = grads.get(nid)
            if g is None:
                g = np.zeros(node.shape)
            elif not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient at leaf {nid}")
            result[nid] = Tensor(np.reshape(g, node.shape))
    return result


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6, atol: float = 0.0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Per coordinate the error is |analytic - numeric| / (|numeric| + 1e-12).
    ``atol`` first discounts that much absolute difference, which lets exact
    zeros of the analytic gradient be compared against difference quotients
    that only carry rounding noise (about eps * |f| / h).

    ``f`` receives ``x`` as a graph-attached tensor and must return a scalar
    tensor built on that same graph.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    g = Graph()
    leaf = g.leaf(x0)
    analytic = backward(g, f(leaf))[leaf].data

    def value(arr):
        fg = Graph()
        return float(f(fg.leaf(arr, requires_grad=False)).data.reshape(-1)[0])

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric.reshape(-1)[i] = (value(plus.reshape(x0.shape)) - value(minus.reshape(x0.shape))) / (2 * h)
    diff = np.maximum(np.abs(analytic - numeric) - atol, 0.0)
    return float(np.max(diff / (np.abs(numeric) + 1e-12)))
