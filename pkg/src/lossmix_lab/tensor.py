"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are plain ``numpy.ndarray`` objects (float64, row-major). A :class:`Node`
wraps a value computed eagerly at construction time together with the closure
needed to push gradients back to its parents. :func:`backward` walks the DAG
once in reverse topological order.

Broadcasting is deliberately not supported: binary ops require equal shapes,
scalars go through :func:`scale`, and row vectors are expanded explicitly with
:func:`broadcast_rows`.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node", "ShapeError", "var", "const", "backward", "value_and_grad", "grad_check",
    "add", "sub", "mul", "scale", "matmul", "conv2d", "relu", "sigmoid", "softmax",
    "log", "log_softmax", "softplus", "smooth_l1", "sum", "mean", "max_pool2",
    "concat", "stop_gradient", "grad_reverse", "reshape", "take", "broadcast_rows",
    "add_n", "branch_log",
]

# Active digest while inside ``branch_log``: piecewise ops feed it their branch choices.
_branches = None


@contextmanager
def branch_log():
    """Record which side of every kink (relu, max-pool, smooth-L1) was taken.

    Yields a hashlib object; equal digests mean two evaluations followed the same
    piecewise-smooth branch.
    """
    global _branches
    prev, _branches = _branches, hashlib.sha1()
    try:
        yield _branches
    finally:
        _branches = prev


def _record(choice: np.ndarray):
    if _branches is not None:
        _branches.update(np.ascontiguousarray(choice).tobytes())


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Node:
    __slots__ = ("value", "grad", "parents", "_backward", "name", "requires_grad", "op")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", name=None,
                 requires_grad=None):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.shape}>"


def var(value, name: str | None = None) -> Node:
    """Leaf that accumulates a gradient."""
    return Node(np.asarray(value, dtype=np.float64), name=name, requires_grad=True)


def const(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _same_shape(op, a: Node, b: Node):
    if a.value.shape != b.value.shape:
        raise ShapeError(op, a.value.shape, b.value.shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("add", a, b)
    return Node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def add_n(nodes: Sequence[Node]) -> Node:
    """Sum of equally shaped nodes, left to right."""
    nodes = [_as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("add_n: empty input")
    for n in nodes[1:]:
        _same_shape("add_n", nodes[0], n)
    out = nodes[0].value.copy()
    for n in nodes[1:]:
        out = out + n.value
    return Node(out, nodes, lambda g: (g,) * len(nodes), "add_n")


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("sub", a, b)
    return Node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    _record(mask)
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Node:
    a = _as_node(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Node:
    """log(1 + exp(x)), computed stably."""
    a = _as_node(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return Node(out, (a,), bw, "softplus")


def log(a) -> Node:
    a = _as_node(a)
    x = a.value
    return Node(np.log(x), (a,), lambda g: (g / x,), "log")


def smooth_l1(a, beta: float = 1.0) -> Node:
    """Elementwise Huber-style loss: 0.5 x^2 / beta if |x| < beta else |x| - 0.5 beta."""
    a = _as_node(a)
    x = a.value
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    _record(small)
    return Node(out, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),), "smooth_l1")


def softmax(a) -> Node:
    """Softmax over the last axis."""
    a = _as_node(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Node(p, (a,), bw, "softmax")


def log_softmax(a) -> Node:
    """log(softmax(x)) over the last axis without forming the softmax first."""
    a = _as_node(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Node(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    a = _as_node(a)
    shape = a.value.shape
    out = np.asarray(a.value.sum(axis=axis), dtype=np.float64)

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Node(out, (a,), bw, "sum")


def mean(a, axis=None) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.value.shape)
    return scale(sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.value.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return Node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, indices) -> Node:
    """Select rows (axis 0) by constant integer indices; repeats allowed."""
    a = _as_node(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise ShapeError("take", a.value.shape, idx.shape)
    shape = a.value.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Node(a.value[idx], (a,), bw, "take")


def broadcast_rows(a, n: int) -> Node:
    """Explicitly tile a vector of shape (d,) into an (n, d) matrix."""
    a = _as_node(a)
    if a.value.ndim != 1:
        raise ShapeError("broadcast_rows", a.value.shape)
    out = np.broadcast_to(a.value, (n,) + a.value.shape).copy()
    return Node(out, (a,), lambda g: (g.sum(axis=0),), "broadcast_rows")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.value.shape for n in nodes)) from None
    splits = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]
    return Node(out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stop_gradient(a) -> Node:
    a = _as_node(a)
    return Node(a.value, (), None, "stop_gradient", requires_grad=False)


def grad_reverse(a, factor: float = 1.0) -> Node:
    """Identity forward; multiplies the incoming gradient by -factor."""
    a = _as_node(a)
    f = float(factor)
    return Node(a.value, (a,), lambda g: (g * -f,), "grad_reverse")


# ---------------------------------------------------------------------------
# linear algebra / conv


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    return Node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def conv2d(x, w, b=None, padding: str = "same") -> Node:
    """Stride-1 2-D convolution (cross-correlation), NHWC input, (kh, kw, cin, cout) kernel."""
    x, w = _as_node(x), _as_node(w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[3] != wv.shape[2]:
        raise ShapeError("conv2d", xv.shape, wv.shape)
    kh, kw, cin, cout = wv.shape
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d(same)", wv.shape)
        ph, pw = kh // 2, kw // 2
        xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    elif padding == "valid":
        ph = pw = 0
        xp = xv
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    n, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", xv.shape, wv.shape)
    # cols: (n, ho, wo, kh, kw, cin)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wmat = wv.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        b = _as_node(b)
        if b.value.shape != (cout,):
            raise ShapeError("conv2d(bias)", b.value.shape, (cout,))
        out = out + b.value
        parents.append(b)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(wv.shape)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, ph:hp - ph, pw:wp - pw, :] if (ph or pw) else gxp
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return Node(out, parents, bw, "conv2d")


def max_pool2(x) -> Node:
    """2x2 max pooling, stride 2, NHWC. Ties route the gradient to the first max in scan order."""
    x = _as_node(x)
    xv = x.value
    if xv.ndim != 4 or xv.shape[1] % 2 or xv.shape[2] % 2:
        raise ShapeError("max_pool2", xv.shape)
    n, h, w, c = xv.shape
    blocks = xv.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    _record(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return Node(out, (x,), bw, "max_pool2")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list:
    order, seen = [], set()
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


def backward(root: Node, wrt: Mapping[str, Node] | Iterable[Node] | None = None) -> dict:
    """Backpropagate from a scalar root.

    Gradients accumulate into ``node.grad`` of every reachable node. If ``wrt``
    is given (a mapping name -> leaf, or an iterable of named leaves) a dict of
    gradients is returned; leaves the root does not depend on get zeros.
    """
    if root.value.size != 1:
        raise ShapeError("backward(non-scalar root)", root.value.shape)
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones(root.value.shape)
    for node in reversed(order):
        g = node.grad
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64)
            else:
                parent.grad = parent.grad + pg
    if wrt is None:
        return {}
    items = wrt.items() if isinstance(wrt, Mapping) else ((n.name, n) for n in wrt)
    return {k: (n.grad if n.grad is not None else np.zeros(n.value.shape)) for k, n in items}


def value_and_grad(fn: Callable[[dict], Node], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn`` on fresh leaves built from ``params``; return (value, grads)."""
    leaves = {k: var(v, name=k) for k, v in params.items()}
    root = fn(leaves)
    grads = backward(root, leaves)
    return float(root.value), grads


def grad_check(f: Callable[[Node], Node], x, eps: float = 1e-5, coords=None,
               skip_kinks: bool = False, report: dict | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` optionally restricts the check to a subset of flat indices. With
    ``skip_kinks`` a coordinate whose +-eps probes change any branch choice of a
    piecewise op (see :func:`branch_log`) is left out, since the central
    difference there straddles a kink. ``report`` (if given) receives the
    ``checked`` and ``skipped`` counts.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = var(x, name="x")
    with branch_log() as base:
        root = f(leaf)
    if not np.all(np.isfinite(root.value)):
        raise FloatingPointError("grad_check: f(x) is not finite")
    analytic = backward(root, {"x": leaf})["x"].ravel()
    flat = x.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    checked = skipped = 0

    def probe(v):
        with branch_log() as h:
            out = float(f(const(v.reshape(x.shape))).value)
        return out, h.digest()

    for i in idx:
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        fp, hp = probe(xp)
        fm, hm = probe(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: f not finite at coordinate {i}")
        if skip_kinks and not (hp == hm == base.digest()):
            skipped += 1
            continue
        checked += 1
        fd = (fp - fm) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(analytic[i])))
    if report is not None:
        report.update(checked=checked, skipped=skipped)
    return worst
