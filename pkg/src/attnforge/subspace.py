"""Random-subspace reparameterization and local intrinsic-dimension search.

A parameter group with flattened initial value ``theta0`` (length D) is
trained through ``theta0 + P @ z`` where ``z`` has length d and ``P`` is a
Fastfood-structured D x d projection applied matrix-free.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from ._backend import kernels
from .errors import ContractError, ShapeError
from .tensor import Tensor


def _next_pow2(n):
    p = 1
    while p < n:
        p *= 2
    return p


class FastfoodProjection:
    """Matrix-free ``D x d`` projection: sign diag, Hadamard, permutation, Gaussian diag, Hadamard.

    The subspace vector is zero-padded to ``D'`` (smallest power of two >= D)
    and the output truncated back to D. Columns are rescaled to exactly unit
    norm; the scales come from pushing the d basis vectors through the
    transform once at construction.
    """

    def __init__(self, D, d, seed=0, kernel=None):
        if not 1 <= d <= D:
            raise ValueError(f"need 1 <= d <= D, got d={d}, D={D}")
        self.D, self.d, self.seed = int(D), int(d), int(seed)
        self.padded = _next_pow2(self.D)
        self._k = kernel or kernels
        rng = np.random.default_rng(seed)
        self.signs = rng.choice([-1.0, 1.0], size=self.padded)
        self.perm = rng.permutation(self.padded)
        self.gauss = rng.standard_normal(self.padded)
        self.col_scale = np.ones(self.d)
        norms = np.sqrt((self._raw(np.eye(self.d)) ** 2).sum(axis=1))
        self.col_scale = 1.0 / norms

    def _raw(self, rows):
        # rows: (b, d) -> (b, D), without column scaling
        b = rows.shape[0]
        x = np.zeros((b, self.padded))
        x[:, : self.d] = rows
        x *= self.signs
        x = self._k.fwht_rows(np.ascontiguousarray(x))
        x = np.ascontiguousarray(x[:, self.perm] * self.gauss)
        x = self._k.fwht_rows(x)
        return x[:, : self.D]

    def apply(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.d,):
            raise ShapeError(f"expected subspace vector of length {self.d}, got {theta.shape}")
        return self._raw((theta * self.col_scale)[None, :])[0]

    def apply_transpose(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.D,):
            raise ShapeError(f"expected ambient vector of length {self.D}, got {y.shape}")
        x = np.zeros((1, self.padded))
        x[0, : self.D] = y
        x = self._k.fwht_rows(x)
        x = x * self.gauss
        z = np.zeros_like(x)
        z[:, self.perm] = x
        z = self._k.fwht_rows(np.ascontiguousarray(z)) * self.signs
        return z[0, : self.d] * self.col_scale

    def matrix(self):
        """Materialize the explicit ``D x d`` matrix (for checking small cases)."""
        return self._raw(np.diag(self.col_scale)).T.copy()


class DenseProjection:
    """Explicit ``D x d`` matrix; ``DenseProjection.identity(D)`` is the d = D fallback."""

    def __init__(self, matrix):
        self.P = np.asarray(matrix, dtype=np.float64)
        if self.P.ndim != 2:
            raise ShapeError("projection matrix must be 2-D")
        self.D, self.d = self.P.shape

    @classmethod
    def identity(cls, D):
        return cls(np.eye(D))

    def apply(self, theta):
        return self.P @ np.asarray(theta, dtype=np.float64)

    def apply_transpose(self, y):
        return self.P.T @ np.asarray(y, dtype=np.float64)

    def matrix(self):
        return self.P.copy()


class IdentityProjection:
    """Matrix-free ``D x D`` identity, the d = D point of a sweep."""

    def __init__(self, D):
        self.D = self.d = int(D)

    def apply(self, theta):
        return np.array(theta, dtype=np.float64)

    def apply_transpose(self, y):
        return np.array(y, dtype=np.float64)

    def matrix(self):
        return np.eye(self.D)


def build_projection(D, d, seed=0):
    return FastfoodProjection(D, d, seed)


def project(theta: Tensor, projection):
    """Differentiable ``P @ theta``."""
    out = projection.apply(theta.data)
    return Tensor._result(out, (theta,), lambda g: (projection.apply_transpose(g),), "project")


# ---------------------------------------------------------------- parameter groups

GROUP_KINDS = ("attention", "mlp", "all")


def group_names(model, kind, layers="all"):
    """Base-parameter names in a (module kind, layer selector) group, sorted."""
    if kind not in GROUP_KINDS:
        raise ValueError(f"group kind must be one of {GROUP_KINDS}")
    nl = model.config.layers
    sel = range(nl) if layers == "all" else [int(l) for l in layers]
    names = []
    for l in sel:
        if not 0 <= l < nl:
            raise ValueError(f"layer {l} out of range")
        pre = f"layers.{l}."
        for name in model.params:
            if not name.startswith(pre):
                continue
            rest = name[len(pre):]
            if kind == "all" or (kind == "attention" and rest.startswith("attn.")) \
                    or (kind == "mlp" and rest.startswith("mlp.")):
                names.append(name)
    return sorted(names)


@dataclass
class SubspaceHandle:
    """A model whose parameter group is materialized as ``theta0 + P @ theta`` each forward."""

    model: object
    names: list
    shapes: list
    theta0: np.ndarray
    theta: Tensor
    projection: object
    offsets: list = field(default_factory=list)

    def weights(self):
        full = Tensor(self.theta0) + project(self.theta, self.projection)
        out = {}
        for name, shape, (a, b) in zip(self.names, self.shapes, self.offsets):
            out[name] = T.reshape(full[a:b], shape)
        return out

    def forward(self, images, trace=True):
        return self.model.forward(images, weights=self.weights(), trace=trace)

    __call__ = forward

    def trainable(self):
        out = {"subspace.theta": self.theta}
        out.update({k: v for k, v in self.model.params.items() if v.requires_grad})
        return out

    def materialize(self):
        """Current group values as plain arrays."""
        flat = self.theta0 + self.projection.apply(self.theta.data)
        return {n: flat[a:b].reshape(s) for n, s, (a, b) in zip(self.names, self.shapes, self.offsets)}


def attach_subspace(model, group, projection=None, seed=0, d=None, train_head=False):
    """Reparameterize ``group`` = ``(kind, layers)`` of a copy of ``model`` through a subspace.

    Either pass a ready ``projection`` (its D must equal the group size) or a
    subspace dimension ``d`` to build a Fastfood projection. All base
    parameters are frozen except, optionally, the classifier head.
    """
    kind, layers = group if isinstance(group, tuple) else (group, "all")
    clone = model.clone()
    names = group_names(clone, kind, layers)
    if not names:
        raise ContractError("subspace group is empty")
    shapes = [clone.params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    offsets = [(int(bounds[i]), int(bounds[i + 1])) for i in range(len(names))]
    theta0 = np.concatenate([clone.params[n].data.reshape(-1) for n in names])
    if projection is None:
        if d is None:
            raise ValueError("pass a projection or a subspace dimension d")
        projection = build_projection(theta0.size, d, seed)
    if projection.D != theta0.size:
        raise ShapeError(f"projection ambient dim {projection.D} != group size {theta0.size}")
    clone.set_trainable(lambda n: train_head and n.startswith("head."))
    theta = Tensor(np.zeros(projection.d), requires_grad=True, name="subspace.theta")
    return SubspaceHandle(clone, names, shapes, theta0, theta, projection, offsets)


# ---------------------------------------------------------------- intrinsic dimension

@dataclass
class SearchResult:
    d_t: int | None            # None: no grid point reached the threshold
    rows: list                 # (d, accuracy, qualified)
    reference: float
    threshold: float

    @property
    def reached(self):
        return self.d_t is not None


def intrinsic_dim_search(evaluate, reference, d_grid, threshold=0.9, stop_early=False):
    """Smallest grid ``d`` whose subspace accuracy reaches ``threshold * reference``.

    ``evaluate(d)`` trains under the same budget as the reference run and
    returns held-out accuracy. Every grid point is evaluated unless
    ``stop_early``; the reported ``d_t`` is always the first qualifying one.
    """
    grid = [int(g) for g in d_grid]
    if not grid:
        raise ValueError("d_grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("d_grid must be strictly ascending")
    target = threshold * reference
    rows, d_t = [], None
    for d in grid:
        acc = float(evaluate(d))
        ok = acc >= target
        rows.append((d, acc, ok))
        if ok and d_t is None:
            d_t = d
            if stop_early:
                break
    return SearchResult(d_t, rows, float(reference), float(threshold))
