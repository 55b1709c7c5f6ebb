"""Reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps an ndarray and records enough information to propagate
gradients backward through the expression graph. Ops are plain functions
(plus the usual operator overloads) that build the graph lazily; calling
``backward()`` on a scalar root accumulates ``.grad`` on every reachable
leaf. Gradient recording can be suspended with ``no_grad()`` for cheap
inference passes.

Log-domain helpers (``logaddexp``, ``logsumexp``, ``log_softmax``) treat
-inf as an absorbing zero-probability sentinel: it never produces NaNs in
either the forward or backward pass.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True

# Additive attention-mask constant: exp(-1e9) underflows to exactly 0.0 in
# both float32 and float64, so masked positions carry no weight and no grad.
NEG_BIG = -1e9


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Var:
    """Node in the reverse-mode graph: an array plus backward closure."""

    __slots__ = ("data", "grad", "_parents", "_backward", "needs_grad")

    # Make ndarray <op> Var defer to the reflected Var operator instead of
    # silently building an object array.
    __array_ufunc__ = None

    def __init__(self, data, needs_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.needs_grad = bool(needs_grad)

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def param(data) -> "Var":
        return Var(np.asarray(data), needs_grad=True)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Var":
        return Var(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, needs_grad={self.needs_grad})"

    # -- graph plumbing --------------------------------------------------------
    def _accum(self, g):
        if not (self.needs_grad or self._parents):
            return  # plain constant; gradient would never be read
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("Var/Var division unsupported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _tracked(*vars_) -> bool:
    return _GRAD_ENABLED and any(
        v.needs_grad or v._parents for v in vars_ if isinstance(v, Var)
    )


def _make(data, parents, backward) -> Var:
    out = Var(data)
    if _tracked(*parents):
        out._parents = tuple(p for p in parents if isinstance(p, Var))
        out._backward = backward
        out.needs_grad = True
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data + b.data

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data * b.data

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data @ b.data

    def bw(g):
        if b.data.ndim == 1:
            ga = np.outer(g, b.data) if a.data.ndim == 2 else g[..., None] * b.data
            gb = (a.data * g[..., None]).reshape(-1, a.data.shape[-1]).sum(0)
        elif a.data.ndim == 1:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.outer(a.data, g)
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        a._accum(_unbroadcast(ga, a.data.shape))
        b._accum(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bw)


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)

    def bw(g):
        a._accum(g * out)

    return _make(out, (a,), bw)


def log(a) -> Var:
    a = as_var(a)
    out = np.log(a.data)

    def bw(g):
        a._accum(g / a.data)

    return _make(out, (a,), bw)


def relu(a) -> Var:
    a = as_var(a)
    out = np.maximum(a.data, 0)

    def bw(g):
        a._accum(g * (a.data > 0))

    return _make(out, (a,), bw)


# -- shape ops -------------------------------------------------------------------


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = a.data.reshape(shape)

    def bw(g):
        a._accum(g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def transpose(a, axes) -> Var:
    a = as_var(a)
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        a._accum(g.transpose(inv))

    return _make(out, (a,), bw)


def concat(vars_, axis=0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out = np.concatenate([v.data for v in vars_], axis=axis)
    sizes = [v.data.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for v, piece in zip(vars_, np.split(g, splits, axis=axis)):
            v._accum(piece)

    return _make(out, tuple(vars_), bw)


def stack(vars_, axis=0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out = np.stack([v.data for v in vars_], axis=axis)

    def bw(g):
        for i, v in enumerate(vars_):
            v._accum(np.take(g, i, axis=axis))

    return _make(out, tuple(vars_), bw)


def take(a, idx) -> Var:
    """Indexing/gather with scatter-add backward.

    Supports basic slicing and advanced (array) indexing; the index object
    must not itself require gradients.
    """
    a = as_var(a)
    out = a.data[idx]

    def bw(g):
        if not (a.needs_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make(out, (a,), bw)


# -- reductions -------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.data.shape[i] for i in axis])
        )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- log-domain ops ----------------------------------------------------------------


def logaddexp(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = np.logaddexp(a.data, b.data)

    def bw(g):
        # exp(x - out) is the posterior weight of each argument; where the
        # output is -inf both weights are defined as 0 to stay NaN-free.
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(out), 0.0, np.exp(a.data - out))
            wb = np.where(np.isneginf(out), 0.0, np.exp(b.data - out))
        a._accum(_unbroadcast(g * wa, a.data.shape))
        b._accum(_unbroadcast(g * wb, b.data.shape))

    return _make(out, (a, b), bw)


def logsumexp(a, axis=-1, keepdims=False) -> Var:
    a = as_var(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isneginf(m), 0.0, m)
    s = np.sum(np.exp(a.data - m), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.where(np.isneginf(out_k), 0.0, np.exp(a.data - out_k))
        a._accum(g * w)

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1) -> Var:
    a = as_var(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True)) + m
    out = a.data - lse

    def bw(g):
        a._accum(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def softmax(a, axis=-1) -> Var:
    a = as_var(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5) -> Var:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data

    def bw(g):
        n = x.data.shape[-1]
        gxn = g * gain.data
        gx = inv * (
            gxn
            - gxn.mean(axis=-1, keepdims=True)
            - xn * (gxn * xn).mean(axis=-1, keepdims=True)
        )
        x._accum(gx)
        gain._accum(_unbroadcast(g * xn, gain.data.shape))
        bias._accum(_unbroadcast(g, bias.data.shape))

    return _make(out, (x, gain, bias), bw)


def dropout(x, rate: float, rng: np.random.Generator) -> Var:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return as_var(x)
    x = as_var(x)
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out = x.data * keep * scale

    def bw(g):
        x._accum(g * keep * scale)

    return _make(out, (x,), bw)
