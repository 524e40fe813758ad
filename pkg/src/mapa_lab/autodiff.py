"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small fixed set of primitives is enough for every objective in this
package: affine maps, tanh, exp/log/square, axis reductions, log-sum-exp,
and a couple of gather operations. Each primitive accepts any mix of
`Tensor`s and plain arrays/scalars; plain values are constants. When no
argument is a `Tensor` the primitive returns a plain ndarray, so the same
objective code serves both the differentiable training path and the fast
evaluation path.

Every primitive checks its output for non-finite values and raises
`NumericError` naming the offending operation, which is how divergence is
detected during training.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

__all__ = [
    "Tensor", "value_and_grad", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose",
    "tanh", "exp", "log", "square",
    "asum", "amean", "logsumexp",
    "reshape", "narrow", "take_rows", "take_pairs", "val",
]


class Tensor:
    """A node in the reverse-mode graph: a value plus its local pullback."""

    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, leaf={self.vjp is None})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


def val(x):
    """Underlying float64 array of a Tensor or constant."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _wrap(name, out, pulls):
    """Build the output node. `pulls` pairs each input with its pullback."""
    if not np.all(np.isfinite(out)):
        raise NumericError(name)
    parents = tuple(x for x, _ in pulls if isinstance(x, Tensor))
    if not parents:
        return out
    fns = tuple(fn for x, fn in pulls if isinstance(x, Tensor))
    return Tensor(out, parents, lambda g: tuple(fn(g) for fn in fns))


def _unbroadcast(g, shape):
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    av, bv = val(a), val(b)
    return _wrap("add", av + bv, (
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ))


def sub(a, b):
    av, bv = val(a), val(b)
    return _wrap("sub", av - bv, (
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ))


def mul(a, b):
    av, bv = val(a), val(b)
    return _wrap("mul", av * bv, (
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ))


def div(a, b):
    av, bv = val(a), val(b)
    return _wrap("div", av / bv, (
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ))


def neg(a):
    av = val(a)
    return _wrap("neg", -av, ((a, lambda g: -g),))


def matmul(a, b):
    av, bv = val(a), val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    return _wrap("matmul", av @ bv, (
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ))


def transpose(a):
    av = val(a)
    return _wrap("transpose", av.T, ((a, lambda g: g.T),))


# ------------------------------------------------------------- element-wise

def tanh(a):
    t = np.tanh(val(a))
    return _wrap("tanh", t, ((a, lambda g: g * (1.0 - t * t)),))


def exp(a):
    e = np.exp(val(a))
    return _wrap("exp", e, ((a, lambda g: g * e),))


def log(a):
    av = val(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _wrap("log", out, ((a, lambda g: g / av),))


def square(a):
    av = val(a)
    return _wrap("square", av * av, ((a, lambda g: 2.0 * av * g),))


# --------------------------------------------------------------- reductions

def _spread(g, shape, axis, keepdims):
    """Expand a reduced gradient back to the pre-reduction shape."""
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def asum(a, axis=None, keepdims=False):
    av = val(a)
    return _wrap("sum", np.sum(av, axis=axis, keepdims=keepdims), (
        (a, lambda g: _spread(g, av.shape, axis, keepdims)),
    ))


def amean(a, axis=None, keepdims=False):
    av = val(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return _wrap("mean", np.mean(av, axis=axis, keepdims=keepdims), (
        (a, lambda g: _spread(g, av.shape, axis, keepdims) / count),
    ))


def logsumexp(a, axis=None, keepdims=False):
    """Max-shifted log-sum-exp, overflow safe for any finite magnitudes."""
    av = val(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    if keepdims:
        out = out_k
    elif axis is None:
        out = out_k.reshape(())
    else:
        out = np.squeeze(out_k, axis=axis)

    def pull(g, a=a, out_k=out_k, axis=axis, keepdims=keepdims):
        av = val(a)
        soft = np.exp(av - out_k)
        return _spread(g, av.shape, axis, keepdims) * soft

    return _wrap("logsumexp", out, ((a, pull),))


# ------------------------------------------------------------ shape & index

def reshape(a, shape):
    av = val(a)
    return _wrap("reshape", av.reshape(shape), ((a, lambda g: g.reshape(av.shape)),))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    av = val(a)
    sl = [slice(None)] * av.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def pull(g):
        z = np.zeros_like(av)
        z[sl] = g
        return z

    return _wrap("narrow", av[sl], ((a, pull),))


def take_rows(a, idx):
    """Gather rows along axis 0; `idx` may have any shape."""
    av = val(a)
    idx = np.asarray(idx)

    def pull(g):
        z = np.zeros_like(av)
        np.add.at(z, idx.ravel(), g.reshape((-1,) + av.shape[1:]))
        return z

    return _wrap("take_rows", av[idx], ((a, pull),))


def take_pairs(a, idx):
    """Per-row gather along axis 1: out[b, s] = a[b, idx[b, s]]."""
    av = val(a)
    idx = np.asarray(idx)
    rows = np.arange(av.shape[0])[:, None]

    def pull(g):
        z = np.zeros_like(av)
        np.add.at(z, (rows, idx), g)
        return z

    return _wrap("take_pairs", av[rows, idx], ((a, pull),))


# ----------------------------------------------------------------- backward

def backward(out, leaves):
    """Gradients of scalar `out` with respect to each leaf tensor.

    Walks the graph in reverse topological order, accumulating into a
    dict keyed by node identity; leaves unreachable from `out` get zero
    gradients. Iterative DFS, so graph depth is not bounded by the
    recursion limit.
    """
    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return [np.array(grads[id(l)]) if id(l) in grads else np.zeros_like(l.value)
            for l in leaves]


def value_and_grad(loss_fn, params):
    """Evaluate `loss_fn` on lifted copies of `params` and backpropagate.

    `params` is a flat list of float64 arrays; the returned gradient list
    mirrors it. `loss_fn` must return a scalar (a Tensor when it depends
    on the parameters, a plain float when it does not).
    """
    leaves = [Tensor(p) for p in params]
    out = loss_fn(leaves)
    if not isinstance(out, Tensor):
        return float(np.asarray(out)), [np.zeros_like(p) for p in params]
    if out.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {out.value.shape}")
    grads = backward(out, leaves)
    return float(out.value), grads
