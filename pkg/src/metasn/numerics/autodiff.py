"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Node` that remembers its parents and a
rule mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar node walks the recorded graph once in reverse
topological order, accumulating gradients additively.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "parents", "grad_fns", "op", "requires_grad", "__weakref__")

    def __init__(self, value, parents=(), grad_fns=(), op="leaf", requires_grad=None):
        self.value = value
        self.parents = tuple(parents)
        self.grad_fns = tuple(grad_fns)
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __getitem__(self, index):
        return take(self, index)


def param(value, dtype=None) -> Node:
    """Leaf node that receives gradients."""
    return Node(np.asarray(value, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


def const(value, dtype=None) -> Node:
    """Leaf node treated as a constant."""
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=dtype or DEFAULT_DTYPE), requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)
    return Node(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("sub", a, b)
    return Node(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Node:
    """Elementwise (broadcasting) product."""
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, a.shape), lambda g: _unbroadcast(g * av, b.shape)),
        "mul",
    )


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / bv, a.shape),
            lambda g: _unbroadcast(-g * out / bv, b.shape),
        ),
        "div",
    )


def scale(a, c: float) -> Node:
    """Multiply by a Python scalar."""
    a = _as_node(a)
    return Node(a.value * c, (a,), (lambda g: g * c,), "scale")


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return Node(av * av, (a,), (lambda g: 2.0 * av * g,), "square")


def sqrt(a) -> Node:
    """Square root; the derivative at exactly zero is taken as zero."""
    a = _as_node(a)
    out = np.sqrt(a.value)

    def grad(g):
        safe = np.where(out > 0, out, 1.0)
        return np.where(out > 0, g / (2.0 * safe), 0.0)

    return Node(out, (a,), (grad,), "sqrt")


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), (lambda g: g * out,), "exp")


def log(a) -> Node:
    a = _as_node(a)
    av = a.value
    return Node(np.log(av), (a,), (lambda g: g / av,), "log")


def relu(a) -> Node:
    """Rectifier max(0, x); derivative 0 at x == 0."""
    a = _as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0).astype(a.value.dtype), (a,), (lambda g: g * mask,), "relu")


maximum0 = relu


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    a = _as_node(a)
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), (grad,), "sum")


def mean(a, axis=None) -> Node:
    a = _as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def logsumexp(a, axis=-1) -> Node:
    """Numerically stable log(sum(exp(a))) along one axis."""
    a = _as_node(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return Node(out, (a,), (lambda g: np.expand_dims(g, axis) * soft,), "logsumexp")


def max_over_time(a) -> Node:
    """Max along the last axis; gradient goes to the first maximal index."""
    a = _as_node(a)
    arg = np.argmax(a.value, axis=-1)
    out = np.take_along_axis(a.value, arg[..., None], axis=-1)[..., 0]

    def grad(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(full, arg[..., None], g[..., None], axis=-1)
        return full

    return Node(out, (a,), (grad,), "max_over_time")


# ---------------------------------------------------------------- structure


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return Node(out, (a,), (lambda g: g.reshape(old),), "reshape")


def take(a, index) -> Node:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = _as_node(a)
    out = a.value[index]

    def grad(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return full

    return Node(np.array(out), (a,), (grad,), "take")


def concat(nodes: Sequence, axis=0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[n.shape for n in nodes]) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Node(out, nodes, [make(i) for i in range(len(nodes))], "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return Node(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g), "matmul")


def affine(x, weight, bias) -> Node:
    """x @ weight + bias for x of shape (..., in) and weight (in, out)."""
    x, weight, bias = _as_node(x), _as_node(weight), _as_node(bias)
    if weight.value.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("affine", x.shape, weight.shape)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("affine", weight.shape, bias.shape)
    xv, wv = x.value, weight.value
    flat = xv.reshape(-1, xv.shape[-1])

    def grad_w(g):
        return flat.T @ g.reshape(-1, g.shape[-1])

    def grad_b(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    return Node(xv @ wv + bias.value, (x, weight, bias), (lambda g: g @ wv.T, grad_w, grad_b), "affine")


def conv1d_valid(x, w) -> Node:
    """Valid 1-D convolution (cross-correlation) over time.

    x: (..., T, D); w: (M, W, D). Output: (..., M, T - W + 1).
    """
    x, w = _as_node(x), _as_node(w)
    xv, wv = x.value, w.value
    if wv.ndim != 3 or xv.ndim < 2 or xv.shape[-1] != wv.shape[2] or xv.shape[-2] < wv.shape[1]:
        raise ShapeError("conv1d_valid", x.shape, w.shape)
    width = wv.shape[1]
    n_out = xv.shape[-2] - width + 1
    windows = np.lib.stride_tricks.sliding_window_view(xv, width, axis=-2)  # (..., T', D, W)
    out = np.einsum("...tdk,mkd->...mt", windows, wv)

    def grad_w(g):
        return np.einsum("...mt,...tdk->mkd", g, windows)

    def grad_x(g):
        gx = np.zeros_like(xv)
        contrib = np.einsum("...mt,mkd->...tkd", g, wv)  # (..., T', W, D)
        for k in range(width):
            gx[..., k : k + n_out, :] += contrib[..., :, k, :]
        return gx

    return Node(out, (x, w), (grad_x, grad_w), "conv1d_valid")


def conv_relu_maxpool(x, lengths, w, b) -> Node:
    """Fused valid convolution + bias + rectifier + masked max-over-time.

    x: (B, T, D) zero-padded batch; lengths: (B,) number of rows of each item
    that take part (each >= filter width, <= T); w: (M, W, D); b: (M,).
    Output: (B, M). Equals ``max_over_time(relu(conv1d_valid(x_i, w) + b))``
    computed per item over its own valid positions.
    """
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    xv, wv, bv = x.value, w.value, b.value
    lengths = np.asarray(lengths, dtype=np.intp)
    if (
        xv.ndim != 3
        or wv.ndim != 3
        or xv.shape[2] != wv.shape[2]
        or bv.shape != (wv.shape[0],)
        or lengths.shape != (xv.shape[0],)
    ):
        raise ShapeError("conv_relu_maxpool", x.shape, w.shape)
    if lengths.size and (lengths.min() < wv.shape[1] or lengths.max() > xv.shape[1]):
        raise ShapeError("conv_relu_maxpool", x.shape, w.shape)
    pooled, arg = kernels.conv_relu_maxpool_forward(xv, lengths, wv, bv)
    cache = {}

    def backward_all(g):
        if cache.get("g") is not g:
            cache["g"] = g
            cache["val"] = kernels.conv_relu_maxpool_backward(
                g, pooled, arg, xv, wv, need_dx=x.requires_grad
            )
        return cache["val"]

    return Node(
        pooled,
        (x, w, b),
        (
            lambda g: backward_all(g)[2],
            lambda g: backward_all(g)[0],
            lambda g: backward_all(g)[1],
        ),
        "conv_relu_maxpool",
    )


# ---------------------------------------------------------------- backward


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, params: Mapping[str, Node]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each node in ``params``.

    Parameters the loss does not depend on receive zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, fn in zip(node.parents, node.grad_fns):
                if not parent.requires_grad:
                    continue
                pg = fn(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return {
        name: np.array(grads.get(id(p), np.zeros_like(p.value)), dtype=p.value.dtype).reshape(p.shape)
        for name, p in params.items()
    }


def value_and_grad(fn: Callable[[dict[str, Node]], Node], values: Mapping[str, np.ndarray]):
    """Evaluate ``fn`` on fresh parameter leaves; return (loss value, grads)."""
    nodes = {k: param(v, dtype=np.asarray(v).dtype) for k, v in values.items()}
    loss = fn(nodes)
    return float(loss.value), backward(loss, nodes)
