"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every forward call records a :class:`Node` holding its value, its parents and
a backward rule.  :func:`backward` walks the graph once in reverse topological
order.  The tape is rebuilt on each forward pass; nothing is retained between
passes except the gradients accumulated on the nodes themselves.

Randomness comes from numpy's PCG64 bit generator, which produces the same
stream for the same seed on every platform.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

ACTIVATIONS = ("relu", "tanh", "identity")


class InputError(ValueError):
    """Raised when an operation receives arguments it cannot accept."""


class Node:
    """One value in the differentiation graph."""

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf",
                 backward: Callable | None = None, requires_grad: bool = True):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value) -> Node:
    """A differentiable input (parameter or embedding table)."""
    return Node(np.array(value, dtype=DTYPE), op="leaf")


def const(value) -> Node:
    return Node(value, op="const", requires_grad=False)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _op(value, parents: Sequence[Node], op: str, backward: Callable) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents, op, backward if needs else None, requires_grad=needs)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(a.value + b.value, (a, b), "add", bw)


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _op(a.value - b.value, (a, b), "sub", bw)


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _op(a.value * b.value, (a, b), "mul", bw)


def relu(x) -> Node:
    x = _wrap(x)
    mask = x.value > 0

    def bw(g):
        return (g * mask,)

    return _op(np.where(mask, x.value, 0.0), (x,), "relu", bw)


def tanh(x) -> Node:
    x = _wrap(x)
    y = np.tanh(x.value)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _op(y, (x,), "tanh", bw)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp never sees a positive argument
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Node:
    x = _wrap(x)
    y = _sigmoid(x.value)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _op(y, (x,), "sigmoid", bw)


def log_sigmoid(x) -> Node:
    """``log(1 / (1 + exp(-x)))`` without overflow for large ``|x|``."""
    x = _wrap(x)
    y = -np.logaddexp(0.0, -x.value)

    def bw(g):
        return (g * _sigmoid(-x.value),)

    return _op(y, (x,), "log_sigmoid", bw)


def _softmax(v: np.ndarray, axis: int) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Node:
    x = _wrap(x)
    y = _softmax(x.value, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _op(y, (x,), "softmax", bw)


def logsumexp(x, axis: int = -1) -> Node:
    """Reduces ``axis`` (not kept)."""
    x = _wrap(x)
    mx = x.value.max(axis=axis, keepdims=True)
    y = np.log(np.exp(x.value - mx).sum(axis=axis, keepdims=True)) + mx

    def bw(g):
        return (np.expand_dims(g, axis) * np.exp(x.value - y),)

    return _op(np.squeeze(y, axis=axis), (x,), "logsumexp", bw)


def activate(x, name: str) -> Node:
    if name == "relu":
        return relu(x)
    if name == "tanh":
        return tanh(x)
    if name == "identity":
        return _wrap(x)
    raise InputError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_all(x) -> Node:
    x = _wrap(x)

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _op(x.value.sum(), (x,), "sum", bw)


def mean_all(x) -> Node:
    x = _wrap(x)
    n = x.value.size

    def bw(g):
        return (np.full(x.shape, g / n),)

    return _op(x.value.mean(), (x,), "mean", bw)


def reshape(x, shape) -> Node:
    x = _wrap(x)

    def bw(g):
        return (g.reshape(x.shape),)

    return _op(x.value.reshape(shape), (x,), "reshape", bw)


def swapaxes(x, a: int, b: int) -> Node:
    x = _wrap(x)

    def bw(g):
        return (np.swapaxes(g, a, b),)

    return _op(np.swapaxes(x.value, a, b), (x,), "swapaxes", bw)


def concat(xs: Sequence, axis: int = -1) -> Node:
    xs = [_wrap(x) for x in xs]
    ax = axis % xs[0].value.ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _op(np.concatenate([x.value for x in xs], axis=ax), xs, "concat", bw)


def take_last(x, index: np.ndarray) -> Node:
    """Pick ``x[..., index[...]]`` row by row (index has x's leading shape)."""
    x = _wrap(x)
    idx = np.asarray(index)[..., None]

    def bw(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _op(np.take_along_axis(x.value, idx, axis=-1)[..., 0], (x,), "take", bw)


def gather_rows(table, ids) -> Node:
    """Embedding lookup: ``table[ids]`` with additive scatter on the way back."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _op(table.value[ids], (table,), "gather", bw)


# ---------------------------------------------------------------------------
# linear algebra and the CNN primitives


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim == 0 or b.value.ndim == 0:
        raise InputError("matmul needs at least 1-D operands")
    if a.value.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.value.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise InputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _op(a.value @ b.value, (a, b), "matmul", bw)


def dense(x, w, b) -> Node:
    """``x @ w + b``."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.shape[-1] != w.shape[0] or b.shape != w.shape[1:]:
        raise InputError(f"dense shape mismatch: x{x.shape} W{w.shape} b{b.shape}")
    return add(matmul(x, w), b)


def conv1d_valid(x, w, b, activation: str = "identity") -> Node:
    """Valid 1-D convolution over the token axis.

    ``x`` is ``(n, d)`` or batched ``(B, n, d)``; ``w`` is one filter ``(h, d)``
    or a bank ``(F, h, d)``; ``b`` is a scalar or ``(F,)``.  The output drops
    the axes that were absent from the inputs, so one filter on one sentence
    gives a length ``n - h + 1`` vector.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if activation not in ACTIVATIONS:
        raise InputError(f"unknown activation {activation!r}")
    single_x = x.value.ndim == 2
    single_w = w.value.ndim == 2
    if x.value.ndim not in (2, 3) or w.value.ndim not in (2, 3):
        raise InputError(f"conv1d_valid expects x (n,d)/(B,n,d) and w (h,d)/(F,h,d), got {x.shape}, {w.shape}")
    xv = x.value[None] if single_x else x.value
    wv = w.value[None] if single_w else w.value
    nb, n, d = xv.shape
    nf, h, dw = wv.shape
    if d != dw:
        raise InputError(f"embedding width {d} does not match filter width {dw}")
    if h < 1 or n < h:
        raise InputError(f"sequence length {n} shorter than filter height {h}")
    bv = np.broadcast_to(b.value, (nf,)) if b.value.ndim == 0 else b.value
    if bv.shape != (nf,):
        raise InputError(f"bias shape {b.shape} does not match {nf} filters")
    length = n - h + 1
    # (B, L, d, h) -> (B, L, h, d) -> (B, L, h*d)
    win = np.swapaxes(sliding_window_view(xv, h, axis=1), -1, -2).reshape(nb, length, h * d)
    wmat = wv.reshape(nf, h * d).T
    out = win @ wmat + bv

    def bw(g):
        g3 = g.reshape(nb, length, nf)
        gw = (g3.reshape(-1, nf).T @ win.reshape(-1, h * d)).reshape(wv.shape)
        gwin = (g3 @ wmat.T).reshape(nb, length, h, d)
        gx = np.zeros_like(xv)
        for j in range(h):
            gx[:, j:j + length] += gwin[:, :, j]
        gb = g3.sum(axis=(0, 1))
        return (gx[0] if single_x else gx,
                gw[0] if single_w else gw,
                gb.sum() if b.value.ndim == 0 else gb)

    shape = (length,)
    if not single_x:
        shape = (nb,) + shape
    if not single_w:
        shape = shape + (nf,)
    node = _op(out.reshape(shape), (x, w, b), "conv1d", bw)
    return activate(node, activation)


def max_pool(x, axis: int = 0) -> tuple[Node, np.ndarray]:
    """Max along ``axis`` (removed).  Ties go to the first position.

    Returns the pooled node and the argmax indices; backward routes the
    incoming gradient to exactly those positions.
    """
    x = _wrap(x)
    if x.value.size == 0 or x.shape[axis] == 0:
        raise InputError("max_pool of an empty array")
    ax = axis % x.value.ndim
    idx = np.argmax(x.value, axis=ax)
    val = np.take_along_axis(x.value, np.expand_dims(idx, ax), axis=ax)

    def bw(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)

    return _op(np.squeeze(val, axis=ax), (x,), "max_pool", bw), idx


def max_pool_global(c) -> tuple[Node, int]:
    """Global max of a 1-D feature map: ``(value, first argmax)``."""
    c = _wrap(c)
    if c.value.ndim != 1:
        raise InputError(f"max_pool_global expects a 1-D map, got shape {c.shape}")
    node, idx = max_pool(c, axis=0)
    return node, int(idx)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(root: Node) -> None:
    """Accumulate ``d root / d node`` into ``node.grad`` for every reachable node.

    Each call adds one full gradient, so calling it twice without zeroing
    doubles every gradient.
    """
    if root.value.size != 1:
        raise InputError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=DTYPE)


def grad_check(fn: Callable[[list[Node]], Node], point: Sequence[np.ndarray],
               step: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over all coordinates.

    ``fn`` maps a list of leaf nodes (one per array in ``point``) to a scalar
    node.  Numeric derivatives use central differences.
    """
    arrays = [np.array(p, dtype=DTYPE) for p in point]
    leaves = [leaf(a) for a in arrays]
    out = fn(leaves)
    backward(out)
    worst = 0.0
    for a, lf in zip(arrays, leaves):
        flat = a.reshape(-1)
        analytic = lf.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn([const(x) for x in arrays]).value)
            flat[i] = orig - step
            down = float(fn([const(x) for x in arrays]).value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """PCG64 generator for ``seed``, optionally split by ``keys``.

    Keys are folded into the seed sequence's spawn key (strings via their
    UTF-8 bytes), so ``make_rng(s, "init", "p")`` and ``make_rng(s, "init", "e")``
    are independent streams that do not depend on call order.
    """
    if seed < 0 or seed >= 2 ** 64:
        raise InputError(f"seed must be a 64-bit unsigned integer, got {seed}")
    spawn = tuple(_key_int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn)))


def _key_int(k: int | str) -> int:
    if isinstance(k, str):
        return int.from_bytes(k.encode("utf-8"), "little")
    return int(k)
