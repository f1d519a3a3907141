"""Graph-induced attention masks and quasi-attention.

Graphs over tokens become additive masks with entries 0 (attend) and -inf
(blocked). Quasi-attention adds a frozen mask ``G`` and a trainable bias
``G_hat`` scaled by ``lam`` to the scaled dot-product scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

NEG_INF = -np.inf
_MODALITY = {"v": "vision", "vision": "vision", "t": "text", "text": "text"}


@dataclass
class TokenGraph:
    n: int
    modalities: list = field(default_factory=list)
    edges: set = field(default_factory=set)

    def __post_init__(self):
        if not self.modalities:
            self.modalities = ["vision"] * self.n
        if len(self.modalities) != self.n:
            raise ValueError("one modality tag per node is required")
        norm = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) has an endpoint outside 0..{self.n - 1}")
            e = (min(i, j), max(i, j))
            norm.add(e)
        self.edges = norm

    def add_edge(self, i, j):
        return TokenGraph(self.n, list(self.modalities), self.edges | {(i, j)})

    def subgraph(self, modality):
        keep = [k for k, m in enumerate(self.modalities) if m == modality]
        index = {k: i for i, k in enumerate(keep)}
        edges = {(index[a], index[b]) for a, b in self.edges if a in index and b in index}
        return TokenGraph(len(keep), [modality] * len(keep), edges)


def read_graph(path):
    """Parse ``N <count>`` / ``M <modalities>`` / ``i j`` edge lines."""
    n, mods, edges = None, None, []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "N":
            n = int(parts[1])
        elif parts[0] == "M":
            toks = parts[1:]
            if len(toks) == 1 and n is not None and len(toks[0]) == n and n > 1:
                toks = list(toks[0])
            try:
                mods = [_MODALITY[t.lower()] for t in toks]
            except KeyError as exc:
                raise ValueError(f"line {lineno}: unknown modality {exc}") from None
        elif len(parts) == 2:
            edges.append((int(parts[0]), int(parts[1])))
        else:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}")
    if n is None:
        raise ValueError("graph file lacks an 'N <count>' header")
    return TokenGraph(n, mods or [], set(edges))


def write_graph(graph: TokenGraph, path):
    code = "".join("v" if m == "vision" else "t" for m in graph.modalities)
    lines = [f"N {graph.n}", f"M {' '.join(code)}"] + [f"{i} {j}" for i, j in sorted(graph.edges)]
    Path(path).write_text("\n".join(lines) + "\n")


def adjacency_to_mask(graph: TokenGraph):
    """``N x N`` mask: 0 on the diagonal and on edges, -inf elsewhere."""
    m = np.full((graph.n, graph.n), NEG_INF)
    np.fill_diagonal(m, 0.0)
    for i, j in graph.edges:
        m[i, j] = 0.0
        m[j, i] = 0.0
    return m


def assemble_multimodal_mask(vision_mask, text_mask):
    """Block-diagonal placement of both masks; the cross-modal blocks are all zero."""
    v = np.asarray(vision_mask, dtype=np.float64)
    t = np.asarray(text_mask, dtype=np.float64)
    for name, m in (("vision", v), ("text", t)):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"{name} mask must be square")
    nv, nt = v.shape[0], t.shape[0]
    out = np.zeros((nv + nt, nv + nt))
    out[:nv, :nv] = v
    out[nv:, nv:] = t
    return out


@dataclass
class QuasiAttentionParams:
    G: np.ndarray          # frozen mask, entries 0 or -inf
    G_hat: Tensor          # trainable bias
    lam: float = 1.0

    @classmethod
    def from_mask(cls, mask, lam=1.0, heads=None):
        mask = np.asarray(mask, dtype=np.float64)
        shape = mask.shape if heads is None else (heads,) + mask.shape
        return cls(mask, Tensor(np.zeros(shape), requires_grad=True, name="G_hat"), float(lam))


def scaled_dot_product_attention(Q, K, V):
    """Vanilla ``softmax(Q K^T / sqrt(d_head)) V`` for one head (or a stack of heads)."""
    return T.matmul(T.softmax_rows(_scores(Q, K, V)), V)


def _scores(Q, K, V):
    if Q.shape[-1] != K.shape[-1] or K.shape[:-1] != V.shape[:-1] or Q.shape[:-2] != K.shape[:-2]:
        raise ShapeError(f"incompatible Q {Q.shape}, K {K.shape}, V {V.shape}")
    perm = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    # per-head query width is d_qk / h
    return T.matmul(Q, T.transpose(K, perm)) * (1.0 / math.sqrt(Q.shape[-1]))


def quasi_attention(Q, K, V, params: QuasiAttentionParams):
    """``softmax(Q K^T / sqrt(d_qk / h) + G + lam * G_hat) V`` for per-head ``Q, K, V``.

    ``Q, K`` are ``seq x d_qk/h`` (optionally with a leading heads axis, in
    which case ``G_hat`` may be per head). The mask ``G`` never receives a
    gradient; ``G_hat`` does.
    """
    G = np.asarray(params.G, dtype=np.float64)
    if not np.all((G == 0) | (G == NEG_INF)):
        raise ValueError("G entries must be 0 or -inf")
    scores = T.add_bias(_scores(Q, K, V), params.G_hat * params.lam)
    return T.matmul(T.softmax_rows(scores, G), V)
