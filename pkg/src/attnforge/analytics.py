"""Attention-map scoring, attribution and trajectory guidance.

Everything here works on attention maps given as tensors or arrays; there
is no diffusion model attached. Differentiable quantities are built from
:mod:`attnforge.tensor` ops so they can be composed with other losses.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class AttentionMap:
    values: np.ndarray            # n_image_tokens x m_text_tokens (or a spatial grid)
    head: int | None = None
    layer: int | None = None
    frame: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attention maps must be finite")

    def to_json(self):
        out = {"shape": list(self.values.shape), "values": self.values.reshape(-1).tolist()}
        for k in ("head", "layer", "frame"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        vals = np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"])
        return cls(vals, obj.get("head"), obj.get("layer"), obj.get("frame"))


def _as_tensor(a):
    if isinstance(a, Tensor):
        return a
    if isinstance(a, AttentionMap):
        return Tensor(a.values)
    return Tensor(a)


# ---------------------------------------------------------------- matching score

def lse_score(A, lam=1.0):
    """Mean over rows of the ``1/lam``-scaled LogSumExp of each row."""
    A = _as_tensor(A)
    if A.ndim != 2 or A.size == 0:
        raise ShapeError(f"lse_score needs a non-empty 2-D map, got shape {A.shape}")
    return T.mean(T.logsumexp_rows(A, lam))


def triplet_loss(f_pos, f_neg, margin=0.2):
    """``max(0, f_neg - f_pos + margin)``; accepts floats or scalar tensors."""
    if isinstance(f_pos, Tensor) or isinstance(f_neg, Tensor):
        diff = _as_tensor(f_neg) - _as_tensor(f_pos)
        return T.relu(diff + margin)
    return max(0.0, float(f_neg) - float(f_pos) + margin)


def additive_prompt(W_k, W_v, p_k, p_v):
    """Prompted projections ``W + p``; the base weights stay frozen."""
    for w, p in ((W_k, p_k), (W_v, p_v)):
        if w.shape != p.shape:
            raise ShapeError(f"prompt shape {p.shape} does not match weight shape {w.shape}")
    return W_k + p_k, W_v + p_v


def head_attribution(A_heads, f):
    """``A_h * df/dA_h`` for every head, with the gradient detached.

    ``f`` maps the list of head tensors to a scalar tensor.
    """
    leaves = [Tensor(np.asarray(_as_tensor(a).data), requires_grad=True) for a in A_heads]
    out = f(leaves)
    if out.requires_grad:
        T.backward(out)
    return [leaf.data * (leaf.grad if leaf.grad is not None else 0.0) for leaf in leaves]


# ---------------------------------------------------------------- trajectories and boxes

@dataclass
class BoxRegion:
    cx: float
    cy: float
    dx: float
    dy: float
    frame: int = 0

    def __post_init__(self):
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("box half-widths must be positive")

    def mask(self, height, width):
        """Boolean ``height x width`` grid; pixel (row y, column x) is inside if within the tolerances."""
        ys, xs = np.mgrid[0:height, 0:width]
        return (np.abs(xs - self.cx) <= self.dx) & (np.abs(ys - self.cy) <= self.dy)


@dataclass
class Trajectory:
    points: list                   # (x, y, t) with strictly increasing t
    tolerance: tuple = (1.0, 1.0)
    velocity_scale: float = 0.0

    def __post_init__(self):
        self.points = [tuple(float(c) for c in p) for p in self.points]
        if not self.points:
            raise ValueError("trajectory needs at least one key point")
        ts = [p[2] for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("key-point timestamps must be strictly increasing")
        if self.velocity_scale < 0:
            raise ValueError("velocity_scale must be >= 0")

    def to_json(self):
        return {"points": [list(p) for p in self.points], "tolerance": list(self.tolerance),
                "velocity_scale": self.velocity_scale}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls([tuple(p) for p in obj["points"]], tuple(obj.get("tolerance", (1.0, 1.0))),
                   float(obj.get("velocity_scale", 0.0)))


def allocate_boxes(traj: Trajectory, frames: int):
    """One box per frame along the trajectory.

    Key points are linearly interpolated onto frame indices (times are in
    frame units, clamped at the ends). With ``velocity_scale > 0`` each
    frame-to-frame displacement is multiplied by ``1 + velocity_scale * v``,
    ``v`` being the local speed, so fast motion yields wider spacing.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    pts = np.array(traj.points)
    dx, dy = traj.tolerance
    f = np.arange(frames, dtype=np.float64)
    if len(pts) == 1:
        xs = np.full(frames, pts[0, 0])
        ys = np.full(frames, pts[0, 1])
    else:
        xs = np.interp(f, pts[:, 2], pts[:, 0])
        ys = np.interp(f, pts[:, 2], pts[:, 1])
        if traj.velocity_scale > 0:
            steps = np.stack([np.diff(xs), np.diff(ys)], axis=1)
            speed = np.hypot(steps[:, 0], steps[:, 1])   # frame spacing is 1
            scaled = steps * (1.0 + traj.velocity_scale * speed)[:, None]
            xs = np.concatenate([[xs[0]], xs[0] + np.cumsum(scaled[:, 0])])
            ys = np.concatenate([[ys[0]], ys[0] + np.cumsum(scaled[:, 1])])
    return [BoxRegion(float(x), float(y), dx, dy, i) for i, (x, y) in enumerate(zip(xs, ys))]


def box_energy(A, box: BoxRegion):
    """``(1 - in-box attention mass / total mass)^2`` over a spatial attention grid."""
    A = _as_tensor(A)
    if A.ndim != 2:
        raise ShapeError("box_energy needs a 2-D spatial grid")
    if np.any(A.data < 0):
        raise ValueError("attention grid must be nonnegative")
    total = A.data.sum()
    if total <= 0:
        raise ValueError("attention grid has zero total mass")
    inside = Tensor(box.mask(*A.shape).astype(np.float64))
    frac = T.div(T.sum_(A * inside), T.sum_(A))
    return T.square(1.0 - frac)


def temporal_smoothness(maps):
    """Mean squared Frobenius distance between consecutive maps."""
    maps = [_as_tensor(m) for m in maps]
    if len(maps) < 2:
        raise ValueError("temporal smoothness needs at least two maps")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ShapeError("all maps must share one shape")
    total = None
    for prev, cur in zip(maps, maps[1:]):
        term = T.sum_(T.square(cur - prev))
        total = term if total is None else total + term
    return total * (1.0 / (len(maps) - 1))


# ---------------------------------------------------------------- guidance

@dataclass
class GuidanceConfig:
    strength: float               # eta
    smoothness: float = 0.0       # lambda on the temporal term
    alphas: list = field(default_factory=list)  # cumulative alpha per diffusion step
    steps: int = 1

    def __post_init__(self):
        if self.strength <= 0:
            raise ValueError("guidance strength must be positive")
        if self.smoothness < 0:
            raise ValueError("smoothness weight must be >= 0")
        if any(not 0 < a <= 1 for a in self.alphas):
            raise ValueError("alphas must lie in (0, 1]")

    def sigma(self, t):
        a = self.alphas[t]
        return math.sqrt((1.0 - a) / a)


def guidance_step(z, energy_fn, cfg: GuidanceConfig, t):
    """``z - sigma_t^2 * eta * grad energy(z)``; returns a new array."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    leaf = Tensor(z, requires_grad=True)
    e = energy_fn(leaf)
    if e.requires_grad:
        T.backward(e)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(z)
    if not np.all(np.isfinite(grad)):
        raise ContractError("guidance gradient is not finite")
    return z - cfg.sigma(t) ** 2 * cfg.strength * grad


def trajectory_energy(grids, boxes, smoothness=0.0):
    """Sum of per-frame box energies plus ``smoothness`` times temporal smoothness."""
    total = None
    for g, b in zip(grids, boxes):
        e = box_energy(g, b)
        total = e if total is None else total + e
    if smoothness and len(grids) > 1:
        total = total + temporal_smoothness(grids) * smoothness
    return total


def spatial_softmax(z, height, width):
    """Map per-frame logits ``(frames, h*w)`` to attention grids that sum to one."""
    probs = T.softmax_rows(z)
    return [T.reshape(probs[i], (height, width)) for i in range(z.shape[0])]


# ---------------------------------------------------------------- beam-pruned class scoring

@dataclass
class BeamResult:
    prediction: int
    calls: int
    timesteps_used: int
    means: dict


def beam_prune_schedule(scorer, C, beam_factor, N, patience, max_timesteps):
    """Predict the class with the lowest mean score while pruning weak classes.

    At each timestep every surviving class is scored ``N`` times. The
    survivors are then cut to ``ceil(count / beam_factor)`` (so ``ceil(C/b)``
    after the first timestep). The run stops once the same class has led for
    ``patience`` consecutive timesteps, or after ``max_timesteps``.
    ``patience=None`` (or ``math.inf``) disables early stopping.
    """
    if C < 1 or beam_factor < 1 or N < 1 or max_timesteps < 1:
        raise ValueError("need C, beam_factor, N and max_timesteps all >= 1")
    active = list(range(C))
    sums = {c: 0.0 for c in active}
    counts = {c: 0 for c in active}
    calls, leader, streak, used = 0, None, 0, 0
    limit = math.inf if patience is None else patience
    for t in range(max_timesteps):
        used += 1
        for c in active:
            for _ in range(N):
                sums[c] += float(scorer(c, t))
                counts[c] += 1
                calls += 1
        ranked = sorted(active, key=lambda c: (sums[c] / counts[c], c))
        active = ranked[: max(1, math.ceil(len(ranked) / beam_factor))]
        best = ranked[0]
        streak = streak + 1 if best == leader else 1
        leader = best
        if streak >= limit:
            break
    means = {c: sums[c] / counts[c] for c in sums if counts[c]}
    return BeamResult(leader, calls, used, means)


def exhaustive_schedule(scorer, C, N, max_timesteps):
    """Score every class ``N`` times at every timestep; argmin of the means."""
    sums = np.zeros(C)
    for t in range(max_timesteps):
        for c in range(C):
            for _ in range(N):
                sums[c] += float(scorer(c, t))
    return BeamResult(int(np.argmin(sums)), C * N * max_timesteps, max_timesteps,
                      {c: sums[c] / (N * max_timesteps) for c in range(C)})
