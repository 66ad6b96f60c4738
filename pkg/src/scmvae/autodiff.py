"""Minimal reverse-mode autodiff over numpy arrays.

Define-by-run: every op builds a node recording its parents and a closure that
pushes the output gradient back to them.  The functional wrappers below
(``tanh``, ``matmul``, ...) dispatch on type, so the same model code runs on
plain ndarrays (no graph, no overhead) or on ``Tensor`` when gradients are
needed.  dtype follows the inputs; training uses float32, gradient checks run
the identical code in float64.
"""

from __future__ import annotations

import numpy as np

from . import convops


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce grad back to the (possibly broadcast) operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, _prev=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = _prev

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        # topo order over the subgraph that requires grad
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def astensor(x, requires_grad=False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), requires_grad=requires_grad)


def value(x) -> np.ndarray:
    """Underlying ndarray of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _node(data, parents, backward):
    req = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _prev=tuple(p for p in parents if isinstance(p, Tensor)))
    if req:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def _pyscalar(x):
    """Return x as a python float if it is a scalar (keeps float32 un-promoted)."""
    if isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool):
        return float(x)
    return None


def add(a, b):
    if not _any_tensor(a, b):
        return np.asarray(a) + np.asarray(b)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a, b = b, a
    s = _pyscalar(b)
    if s is not None:
        a = astensor(a)
        out_data = a.data + s

        def backward(g):
            a._accum(g)

        return _node(out_data, (a,), backward)
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b):
    if not _any_tensor(a, b):
        return np.asarray(a) * np.asarray(b)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a, b = b, a
    s = _pyscalar(b)
    if s is not None:
        a = astensor(a)
        out_data = a.data * s

        def backward(g):
            a._accum(g * s)

        return _node(out_data, (a,), backward)
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def power(a, p):
    if not _any_tensor(a):
        return np.asarray(a) ** p
    a = astensor(a)
    out_data = a.data**p

    def backward(g):
        if a.requires_grad:
            a._accum(g * (p * a.data ** (p - 1.0)))

    return _node(out_data, (a,), backward)


def square(a):
    return mul(a, a) if _any_tensor(a) else np.square(a)


def sqrt(a):
    if not _any_tensor(a):
        return np.sqrt(a)
    a = astensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * (0.5 / out_data))

    return _node(out_data, (a,), backward)


def exp(a):
    if not _any_tensor(a):
        return np.exp(a)
    a = astensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _node(out_data, (a,), backward)


def log(a):
    if not _any_tensor(a):
        return np.log(a)
    a = astensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _node(out_data, (a,), backward)


def tanh(a):
    if not _any_tensor(a):
        return np.tanh(a)
    a = astensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def _sigmoid_np(x):
    # stable and branch-free: exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    if not _any_tensor(a):
        x = np.asarray(a)
        if x.dtype.kind != "f":
            x = x.astype(np.float64)
        return _sigmoid_np(x)
    a = astensor(a)
    out_data = _sigmoid_np(a.data)

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def _softplus_np(x):
    out = np.logaddexp(0.0, x)
    return out.astype(x.dtype, copy=False) if x.dtype.kind == "f" else out


def softplus(a):
    if not _any_tensor(a):
        return _softplus_np(np.asarray(a))
    a = astensor(a)
    out_data = _softplus_np(a.data)

    def backward(g):
        a._accum(g * _sigmoid_np(a.data))

    return _node(out_data, (a,), backward)


def silu(a):
    """x * sigmoid(x); smooth activation so finite-difference checks stay clean."""
    if not _any_tensor(a):
        x = np.asarray(a)
        return x * _sigmoid_np(x)
    a = astensor(a)
    s = _sigmoid_np(a.data)
    out_data = a.data * s

    def backward(g):
        a._accum(g * (s * (1.0 + a.data * (1.0 - s))))

    return _node(out_data, (a,), backward)


def detach(a):
    return a.detach() if isinstance(a, Tensor) else np.asarray(a)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    if not _any_tensor(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if not _any_tensor(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    a = astensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def tmax(a, axis=None, keepdims=False):
    """Max reduction; gradient routed to the first argmax (ties broken by order)."""
    if not _any_tensor(a):
        return np.max(a, axis=axis, keepdims=keepdims)
    a = astensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        full = out_data if keepdims or axis is None else np.expand_dims(out_data, axis)
        hit = a.data == full
        # route to a single element per reduction slice
        if axis is None:
            flat = hit.reshape(-1)
            first = np.zeros_like(flat)
            first[np.argmax(flat)] = True
            hit = first.reshape(hit.shape)
        else:
            cum = np.cumsum(hit, axis=axis)
            hit = hit & (cum == 1)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        a._accum(np.where(hit, gg, 0.0).astype(a.data.dtype, copy=False))

    return _node(out_data, (a,), backward)


def logsumexp(a, axis=None, keepdims=False):
    if not _any_tensor(a):
        x = np.asarray(a)
        m = np.max(x, axis=axis, keepdims=True)
        out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
        return out if keepdims else np.squeeze(out, axis=axis)
    a = astensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out_full = m + np.log(s)
    out_data = out_full if keepdims else np.squeeze(out_full, axis=axis)
    soft = ex / s

    def backward(g):
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        a._accum(gg * soft)

    return _node(out_data, (a,), backward)


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    if not _any_tensor(a):
        return np.reshape(a, shape)
    a = astensor(a)
    out_data = a.data.reshape(shape)
    orig = a.data.shape

    def backward(g):
        a._accum(g.reshape(orig))

    return _node(out_data, (a,), backward)


def transpose(a, axes=None):
    if not _any_tensor(a):
        return np.transpose(a, axes)
    a = astensor(a)
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _node(out_data, (a,), backward)


def take(a, idx):
    if not _any_tensor(a):
        return np.asarray(a)[idx]
    a = astensor(a)
    out_data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accum(buf)

    return _node(out_data, (a,), backward)


def concat(parts, axis=0):
    if not any(_any_tensor(p) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [astensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accum(g[tuple(sl)])

    return _node(out_data, parts, backward)


def stack(parts, axis=0):
    if not any(_any_tensor(p) for p in parts):
        return np.stack(parts, axis=axis)
    parts = [astensor(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(np.take(g, i, axis=axis))

    return _node(out_data, parts, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    if not _any_tensor(a, b):
        return np.asarray(a) @ np.asarray(b)
    a, b = astensor(a), astensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backward)


def solve(a, b):
    """Solve a @ x = b. Gradients: db = a^-T g, da = -db @ x^T."""
    if not _any_tensor(a, b):
        return np.linalg.solve(np.asarray(a), np.asarray(b))
    a, b = astensor(a), astensor(b)
    x = np.linalg.solve(a.data, b.data)

    def backward(g):
        gb = np.linalg.solve(a.data.T, g)
        if b.requires_grad:
            b._accum(gb)
        if a.requires_grad:
            a._accum(-(gb @ x.T) if x.ndim > 1 else -np.outer(gb, x))

    return _node(x, (a, b), backward)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv2d(x, w, stride=2, pad=1):
    """Channels-last conv: x (B,H,W,Cin), w (k,k,Cin,Cout)."""
    if not _any_tensor(x, w):
        return convops.conv2d_forward(np.asarray(x), np.asarray(w), stride, pad)[0]
    x, w = astensor(x), astensor(w)
    out_data, col = convops.conv2d_forward(x.data, w.data, stride, pad)

    def backward(g):
        if x.requires_grad:
            x._accum(convops.conv2d_input_grad(g, w.data, x.data.shape, stride, pad))
        if w.requires_grad:
            w._accum(convops.conv2d_weight_grad(col, g, w.data.shape))

    return _node(out_data, (x, w), backward)


def conv_transpose2d(x, w, stride=2, pad=1, out_hw=None):
    """Channels-last transposed conv: x (B,Hi,Wi,Cin), w (k,k,Cout,Cin)."""
    if out_hw is None:
        k = value(w).shape[0]
        hi, wi = value(x).shape[1], value(x).shape[2]
        out_hw = ((hi - 1) * stride - 2 * pad + k, (wi - 1) * stride - 2 * pad + k)
    if not _any_tensor(x, w):
        return convops.conv_transpose2d_forward(np.asarray(x), np.asarray(w), stride, pad, out_hw)
    x, w = astensor(x), astensor(w)
    out_data = convops.conv_transpose2d_forward(x.data, w.data, stride, pad, out_hw)

    def backward(g):
        if x.requires_grad:
            x._accum(convops.conv2d_forward(g, w.data, stride, pad)[0])
        if w.requires_grad:
            # adjoint identity: <g, convT(x; w)> == <conv(g; w), x>
            col = convops.im2col(g, w.data.shape[0], stride, pad)
            w._accum(convops.conv2d_weight_grad(col, x.data, w.data.shape))

    return _node(out_data, (x, w), backward)
