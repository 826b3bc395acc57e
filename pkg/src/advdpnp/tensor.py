"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records its parents and a context object on the output
tensor. ``gradients`` walks that record in reverse topological order and
applies the rule stored in ``BACKWARD_RULES`` for each op. Rules live in a
module-level table so verification code can swap one out and confirm that
``grad_check`` notices.

A ``stop_gradient`` node is a gradient barrier: it forwards its parent's
value unchanged and passes nothing back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SQRT_ABS_EPS = 1e-12


class TensorError(Exception):
    """Base class for graph evaluation failures; carries the offending node."""

    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


_counter = 0


def _next_id() -> int:
    global _counter
    _counter += 1
    return _counter


class Tensor:
    __slots__ = ("data", "parents", "op", "ctx", "requires_grad", "barrier", "name", "uid")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self.ctx = None
        self.requires_grad = requires_grad
        self.barrier = False
        self.name = name
        self.uid = _next_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node_label(op: str, name: str | None) -> str:
    return f"{op}[{name}]" if name else op


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], ctx=None, name: str | None = None) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(_node_label(op, name), "non-finite value produced")
    out = Tensor(data, name=name)
    out.op = op
    out.parents = parents
    out.ctx = ctx
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor, name: str | None) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(_node_label(op, name), f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b, name)
    return _make("add", a.data + b.data, (a, b), name=name)


def sub(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b, name)
    return _make("sub", a.data - b.data, (a, b), name=name)


def mul(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b, name)
    return _make("mul", a.data * b.data, (a, b), name=name)


def neg(a, name=None) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), name=name)


def matmul(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(_node_label("matmul", name), f"cannot multiply {a.shape} by {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b), name=name)


def affine(w, x, b, name=None) -> Tensor:
    """``x @ w + b`` for a batch ``x`` (B, n), weights (n, m) and bias (m,)."""
    w, x, b = as_tensor(w), as_tensor(x), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            _node_label("affine", name), f"input {x.shape}, weight {w.shape}, bias {b.shape} do not conform"
        )
    return _make("affine", x.data @ w.data + b.data, (w, x, b), name=name)


def relu(a, name=None) -> Tensor:
    a = as_tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,), name=name)


def exp(a, name=None) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), name=name)


def log(a, name=None) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError(_node_label("log", name), "log of a non-positive value")
    return _make("log", np.log(a.data), (a,), name=name)


def square(a, name=None) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), name=name)


def sqrt_abs(a, name=None) -> Tensor:
    """Smoothed ``sqrt(|a| + eps)``; finite derivative at zero."""
    a = as_tensor(a)
    return _make("sqrt_abs", np.sqrt(np.abs(a.data) + SQRT_ABS_EPS), (a,), name=name)


def sum(a, axis=None, name=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _make("sum", np.sum(a.data, axis=axis), (a,), ctx=axis, name=name)


def mean(a, axis=None, name=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return _make("mean", np.mean(a.data, axis=axis), (a,), ctx=(axis, count), name=name)


def max(a, axis=-1, name=None) -> Tensor:  # noqa: A001
    """Reduce-max along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return _make("max", out, (a,), ctx=(axis, idx), name=name)


def log_softmax(a, name=None) -> Tensor:
    """Row-wise log-softmax over the last axis, max-shifted."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    return _make("log_softmax", out, (a,), ctx=np.exp(out), name=name)


def softmax(a, name=None) -> Tensor:
    return exp(log_softmax(a, name=name), name=name)


def inner(a, b, name=None) -> Tensor:
    """Row-wise inner product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(_node_label("inner", name), f"operands differ: {a.shape} vs {b.shape}")
    return _make("inner", np.sum(a.data * b.data, axis=-1), (a, b), name=name)


def l2_norm(a, name=None) -> Tensor:
    """Row-wise Euclidean norm over the last axis."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=-1))
    if np.any(out == 0):
        raise NonFiniteError(_node_label("l2_norm", name), "norm of a zero vector has no gradient")
    return _make("l2_norm", out, (a,), name=name)


def reshape(a, shape, name=None) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(_node_label("reshape", name), f"cannot reshape {a.shape} to {shape}") from None
    return _make("reshape", out, (a,), name=name)


def transpose(a, name=None) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(_node_label("transpose", name), f"needs a 2-D operand, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), name=name)


def take_rows(a, index, name=None) -> Tensor:
    """Gather rows ``a[index]`` of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.shape[0])):
        raise ShapeError(_node_label("take_rows", name), f"bad row index for shape {a.shape}")
    return _make("take_rows", a.data[index], (a,), ctx=index, name=name)


def pick(a, index, name=None) -> Tensor:
    """Select ``a[i, index[i]]`` for each row ``i``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],) or (index.size and (index.min() < 0 or index.max() >= a.shape[1])):
        raise ShapeError(_node_label("pick", name), f"bad column index for shape {a.shape}")
    return _make("pick", a.data[np.arange(a.shape[0]), index], (a,), ctx=index, name=name)


def stop_gradient(a, name=None) -> Tensor:
    a = as_tensor(a)
    out = _make("stop_gradient", a.data, (a,), name=name)
    out.barrier = True
    out.requires_grad = False
    return out


def conv2d(x, w, b, padding: int = 0, name=None) -> Tensor:
    """Stride-1 2-D convolution: x (B,C,H,W), w (O,C,k,k), b (O,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],) or w.shape[2] != w.shape[3]:
        raise ShapeError(_node_label("conv2d", name), f"input {x.shape}, weight {w.shape}, bias {b.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError(_node_label("conv2d", name), "kernel larger than padded input")
    B, C = xp.shape[:2]
    Ho, Wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    # im2col rows are (b, h, w), columns (c, i, j); one BLAS product does the rest
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, -1)
    out = cols @ w.data.reshape(w.shape[0], -1).T + b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2))
    return _make("conv2d", out, (x, w, b), ctx=(padding, cols), name=name)


def maxpool2d(x, name=None) -> Tensor:
    """2x2 max pooling with stride 2 over (B,C,H,W); H and W must be even."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(_node_label("maxpool2d", name), f"needs even spatial extents, got {x.shape}")
    B, C, H, W = x.shape
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return _make("maxpool2d", out, (x,), ctx=idx, name=name)


# ------------------------------------------------------------ backward rules


def _bw_add(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _bw_mul(node, g):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _bw_neg(node, g):
    return (-g,)


def _bw_matmul(node, g):
    a, b = node.parents
    return g @ b.data.T, a.data.T @ g


def _bw_affine(node, g):
    w, x, _ = node.parents
    return x.data.T @ g, g @ w.data.T, g.sum(axis=0)


def _bw_relu(node, g):
    (a,) = node.parents
    return (g * (a.data > 0),)


def _bw_exp(node, g):
    return (g * node.data,)


def _bw_log(node, g):
    (a,) = node.parents
    return (g / a.data,)


def _bw_square(node, g):
    (a,) = node.parents
    return (2.0 * g * a.data,)


def _bw_sqrt_abs(node, g):
    (a,) = node.parents
    return (g * np.sign(a.data) / (2.0 * node.data),)


def _bw_sum(node, g):
    (a,) = node.parents
    axis = node.ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _bw_mean(node, g):
    (a,) = node.parents
    axis, count = node.ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, a.shape).copy(),)


def _bw_max(node, g):
    (a,) = node.parents
    axis, idx = node.ctx
    out = np.zeros(a.shape)
    np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return (out,)


def _bw_log_softmax(node, g):
    probs = node.ctx
    return (g - probs * g.sum(axis=-1, keepdims=True),)


def _bw_inner(node, g):
    a, b = node.parents
    g = np.expand_dims(g, -1)
    return g * b.data, g * a.data


def _bw_l2_norm(node, g):
    (a,) = node.parents
    return (np.expand_dims(g / node.data, -1) * a.data,)


def _bw_reshape(node, g):
    (a,) = node.parents
    return (g.reshape(a.shape),)


def _bw_transpose(node, g):
    return (g.T,)


def _bw_take_rows(node, g):
    (a,) = node.parents
    out = np.zeros(a.shape)
    np.add.at(out, node.ctx, g)
    return (out,)


def _bw_pick(node, g):
    (a,) = node.parents
    out = np.zeros(a.shape)
    out[np.arange(a.shape[0]), node.ctx] = g
    return (out,)


def _bw_conv2d(node, g):
    x, w, _ = node.parents
    padding, cols = node.ctx
    O, C, k, _ = w.shape
    B, _, H, W = x.shape
    Ho, Wo = g.shape[2], g.shape[3]
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
    gb = g2.sum(axis=0)
    # frozen weights (the attack loop) skip their product entirely
    gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else np.zeros(w.shape)
    if not x.requires_grad:
        return np.zeros(x.shape), gw, gb
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # strided slices fall off the BLAS fast path
    gxh = np.zeros((B, H + 2 * padding, W + 2 * padding, C))
    for i in range(k):
        for j in range(k):
            gxh[:, i : i + Ho, j : j + Wo, :] += (g2 @ wk[i, j]).reshape(B, Ho, Wo, C)
    gx = gxh[:, padding : padding + H, padding : padding + W, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gx), gw, gb


def _bw_maxpool2d(node, g):
    (x,) = node.parents
    B, C, H, W = x.shape
    blocks = np.zeros((B, C, H // 2, W // 2, 4))
    np.put_along_axis(blocks, node.ctx[..., None], g[..., None], axis=-1)
    out = blocks.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
    return (out,)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "neg": _bw_neg,
    "matmul": _bw_matmul,
    "affine": _bw_affine,
    "relu": _bw_relu,
    "exp": _bw_exp,
    "log": _bw_log,
    "square": _bw_square,
    "sqrt_abs": _bw_sqrt_abs,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "max": _bw_max,
    "log_softmax": _bw_log_softmax,
    "inner": _bw_inner,
    "l2_norm": _bw_l2_norm,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
    "take_rows": _bw_take_rows,
    "pick": _bw_pick,
    "conv2d": _bw_conv2d,
    "maxpool2d": _bw_maxpool2d,
}


# ------------------------------------------------------------ graph walking


def topological_order(outputs: Iterable[Tensor]) -> list[Tensor]:
    """Nodes reachable from ``outputs``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in outputs:
        if root.uid in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.uid not in seen:
                    stack.append((p, False))
    return order


def gradients(output: Tensor, wrt: list[Tensor]) -> list[np.ndarray]:
    """d(output)/d(w) for each tensor in ``wrt``; unreachable ones get zeros."""
    if output.data.size != 1:
        raise ShapeError(_node_label(output.op, output.name), f"backward needs a scalar output, got {output.shape}")
    grads: dict[int, np.ndarray] = {output.uid: np.ones(output.shape)}
    for node in reversed(topological_order([output])):
        g = grads.pop(node.uid, None) if node.parents else grads.get(node.uid)
        if g is None or not node.parents or node.barrier:
            continue
        parent_grads = BACKWARD_RULES[node.op](node, g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(_node_label(node.op, node.name), "non-finite gradient")
            if p.uid in grads:
                grads[p.uid] = grads[p.uid] + pg
            else:
                grads[p.uid] = pg
    return [grads.get(w.uid, np.zeros(w.shape)) for w in wrt]


# ------------------------------------------------ function-level interface


@dataclass
class Node:
    op: str
    parents: list[int]
    barrier: bool = False


@dataclass
class Graph:
    """Topologically ordered record of one evaluation of a graph function."""

    nodes: list[Node] = field(default_factory=list)
    inputs: dict[str, int] = field(default_factory=dict)
    outputs: dict[str, int] = field(default_factory=dict)


GraphFn = Callable[[Mapping[str, Tensor]], "Tensor | Mapping[str, Tensor]"]


def _bind(inputs: Mapping[str, object], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad, name=k) for k, v in inputs.items()}


def _outputs(result) -> dict[str, Tensor]:
    if isinstance(result, Tensor):
        return {"output": result}
    return dict(result)


def trace(fn: GraphFn, inputs: Mapping[str, object]) -> Graph:
    bound = _bind(inputs, requires_grad=True)
    outs = _outputs(fn(bound))
    order = topological_order(list(outs.values()) + list(bound.values()))
    position = {t.uid: i for i, t in enumerate(order)}
    graph = Graph()
    for t in order:
        graph.nodes.append(Node(t.op, [position[p.uid] for p in t.parents], t.barrier))
    graph.inputs = {k: position[t.uid] for k, t in bound.items()}
    graph.outputs = {k: position[t.uid] for k, t in outs.items()}
    return graph


def forward(fn: GraphFn, inputs: Mapping[str, object]) -> dict[str, np.ndarray]:
    """Evaluate ``fn`` on plain arrays; returns every named output as an array."""
    outs = _outputs(fn(_bind(inputs, requires_grad=False)))
    return {k: v.data.copy() for k, v in outs.items()}


def backward(fn: GraphFn, inputs: Mapping[str, object], output: str = "output") -> dict[str, np.ndarray]:
    """Gradient of the scalar output ``output`` of ``fn`` w.r.t. every input."""
    bound = _bind(inputs, requires_grad=True)
    outs = _outputs(fn(bound))
    if output not in outs:
        raise KeyError(f"graph has no output named {output!r}")
    names = list(bound)
    grads = gradients(outs[output], [bound[k] for k in names])
    return dict(zip(names, grads))


def grad_check(fn: GraphFn, point: Mapping[str, object], step: float = 1e-5, output: str = "output") -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    analytic = backward(fn, point, output)

    def value(p):
        return float(forward(fn, p)[output])

    worst = 0.0
    for name, base in point.items():
        a = analytic[name]
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(name, "non-finite analytic gradient")
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += step
            minus[i] -= step
            hi = value({**point, name: plus.reshape(base.shape)})
            lo = value({**point, name: minus.reshape(base.shape)})
            numeric = (hi - lo) / (2 * step)
            if not np.isfinite(numeric):
                raise NonFiniteError(name, "non-finite numeric gradient")
            ai = a.reshape(-1)[i]
            worst = np.maximum(worst, abs(ai - numeric) / np.maximum(1.0, abs(ai)))
    return float(worst)
