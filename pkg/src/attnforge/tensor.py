"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output gradient
to input gradients. ``backward`` topologically orders the recorded graph (the
tape) and sweeps it once in reverse. Shapes must match exactly; the only
implicit expansion is :func:`add_bias`, which adds a tensor whose shape equals
the *trailing* dimensions of the other operand.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, allow_inf=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not allow_inf and not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (pass allow_inf=True for masks)")
        if allow_inf and (np.any(np.isnan(arr)) or np.any(arr == np.inf)):
            raise ValueError("mask tensors may only contain finite values or -inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = rg
        if rg:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        return self.data.reshape(-1)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._result(self.data, (), None, "detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor._result(a.data + s, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _check_same(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor._result(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    a = as_tensor(a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    return Tensor._result(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def square(a):
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    ad = a.data
    on = ad > 0
    return Tensor._result(np.where(on, ad, 0.0), (a,), lambda g: (g * on,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), bw, "gelu")


def add_bias(x, b):
    """``x + b`` where ``b.shape`` equals the trailing dimensions of ``x``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: {b.shape} is not a trailing shape of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def bw(g):
        return g, (g.sum(axis=lead) if lead else g)

    return Tensor._result(x.data + b.data, (x, b), bw, "add_bias")


# ---------------------------------------------------------------- structural

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}: {exc}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), bw, "concat")


def sum_(a, axis=None):
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)`` with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        ad, bd = a.data, b.data

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return Tensor._result(ad @ bd, (a, b), bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._result(ad @ bd, (a, b), bw, "bmm")


def kron(a, b):
    """Kronecker product of two matrices: ``out[i*p+s, j*q+t] = a[i,j] * b[s,t]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron needs 2-D operands, got {a.shape} and {b.shape}")
    m, n = a.shape
    p, q = b.shape
    ad = np.ascontiguousarray(a.data)
    bd = np.ascontiguousarray(b.data)
    out = kernels.kron(ad, bd)

    def bw(g):
        g4 = g.reshape(m, p, n, q)
        return np.einsum("isjt,st->ij", g4, bd), np.einsum("isjt,ij->st", g4, ad)

    return Tensor._result(out, (a, b), bw, "kron")


# ---------------------------------------------------------------- reductions over rows

def _mask_array(mask, shape):
    if mask is None:
        return None
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.ndim > len(shape) or tuple(shape[len(shape) - m.ndim:]) != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match trailing dims of {shape}")
    if np.any(np.isnan(m)) or np.any(m == np.inf):
        raise ValueError("mask entries must be finite or -inf")
    return np.ascontiguousarray(m.reshape(-1, shape[-1]))


def softmax_rows(x, mask=None):
    """Softmax over the last axis, optionally after adding a constant mask.

    ``mask`` (array or tensor, never differentiated) must have the shape of
    ``x`` or of its trailing dimensions; entries are 0, finite, or -inf.
    Masked (-inf) positions come out exactly 0. A fully masked row raises
    :class:`~attnforge.errors.DegenerateRowError`.
    """
    shape = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, shape[-1]))
    m2 = _mask_array(mask, shape)
    y = kernels.softmax_rows(x2, m2)

    def bw(g):
        return (kernels.softmax_rows_backward(y, np.ascontiguousarray(g.reshape(y.shape))).reshape(shape),)

    return Tensor._result(y.reshape(shape), (x,), bw, "softmax_rows")


def logsumexp_rows(x, lam=1.0):
    """``(1/lam) * log(sum_j exp(lam * x[..., j]))`` for every row of ``x``."""
    lam = float(lam)
    if lam <= 0:
        raise ValueError("lam must be positive")
    shape = x.shape
    if x.ndim == 0 or shape[-1] == 0:
        raise ShapeError("logsumexp needs a non-empty last axis")
    x2 = np.ascontiguousarray(x.data.reshape(-1, shape[-1]))
    out = kernels.logsumexp_rows(x2, lam)

    def bw(g):
        w = kernels.softmax_rows(np.ascontiguousarray(lam * x2), None)
        return ((w * g.reshape(-1, 1)).reshape(shape),)

    return Tensor._result(out.reshape(shape[:-1]), (x,), bw, "logsumexp_rows")


def logsumexp_row(a, lam=1.0):
    """Scalar LogSumExp of a vector, scaled by ``1/lam``."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"logsumexp_row needs a vector, got shape {a.shape}")
    return logsumexp_rows(a, lam)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gamma/beta must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    ld = np.ascontiguousarray(logits.data)
    lse = kernels.logsumexp_rows(ld, 1.0)
    rows = np.arange(ld.shape[0])
    loss = float((lse - ld[rows, labels]).mean())
    bsz = ld.shape[0]

    def bw(g):
        p = np.exp(ld - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / bsz),)

    return Tensor._result(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- reverse sweep

@dataclass(frozen=True)
class TapeRecord:
    op: str
    inputs: tuple
    output: int


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tape(loss):
    """Topologically ordered records of the graph reachable from ``loss``."""
    return [TapeRecord(t._op, tuple(id(p) for p in t._parents), id(t)) for t in _topo(loss)]


def backward(loss):
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f, x, eps=1e-5):
    """Max relative error between reverse-mode and central-difference gradients of ``f`` at ``x``.

    The relative error of each element uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base)).item()
            flat[i] = orig - eps
            fm = f(Tensor(base)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
