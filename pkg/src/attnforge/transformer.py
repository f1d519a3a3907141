"""A small vision-transformer classifier built on :mod:`attnforge.tensor`.

Pre-norm encoder layers, a learned class token and learned positional
embeddings. Attention accepts additive biases (trainable tensors or constant
masks) and the forward pass accepts substitute weights, so adaptation methods
can inject deltas without touching the frozen base parameters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

ATTN_ROLES = ("W_q", "W_k", "W_v", "W_o")
_ROLE_BIAS = {"W_q": "b_q", "W_k": "b_k", "W_v": "b_v", "W_o": "b_o"}


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 4
    image_side: int = 16
    classes: int = 2
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("layers", "d_model", "heads", "patch_size", "image_side"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")
        if self.image_side % self.patch_size:
            raise ValueError("patch_size must divide image_side")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def num_patches(self):
        return (self.image_side // self.patch_size) ** 2

    @property
    def seq_len(self):
        return self.num_patches + 1

    @property
    def d_mlp(self):
        return max(1, int(round(self.d_model * self.mlp_ratio)))

    @property
    def head_dim(self):
        return self.d_model // self.heads


def trunc_normal(rng, shape, std):
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def layer_prefix(layer):
    return f"layers.{layer}"


def attn_name(layer, role):
    return f"layers.{layer}.attn.{role}"


def attn_bias_name(layer, role):
    return f"layers.{layer}.attn.{_ROLE_BIAS[role]}"


def init_params(cfg: ModelConfig):
    rng = np.random.default_rng(cfg.seed)
    d, p2, m = cfg.d_model, cfg.patch_size ** 2, cfg.d_mlp
    std = cfg.init_std
    shapes = [("patch.W", (p2, d), "w"), ("patch.b", (d,), "0"),
              ("cls", (d,), "w"), ("pos", (cfg.seq_len, d), "w")]
    for l in range(cfg.layers):
        pre = layer_prefix(l)
        shapes += [(f"{pre}.ln1.g", (d,), "1"), (f"{pre}.ln1.b", (d,), "0")]
        for role in ATTN_ROLES:
            shapes += [(attn_name(l, role), (d, d), "w"), (attn_bias_name(l, role), (d,), "0")]
        shapes += [(f"{pre}.ln2.g", (d,), "1"), (f"{pre}.ln2.b", (d,), "0"),
                   (f"{pre}.mlp.W1", (d, m), "w"), (f"{pre}.mlp.b1", (m,), "0"),
                   (f"{pre}.mlp.W2", (m, d), "w"), (f"{pre}.mlp.b2", (d,), "0")]
    shapes += [("ln_f.g", (d,), "1"), ("ln_f.b", (d,), "0"),
               ("head.W", (d, cfg.classes), "w"), ("head.b", (cfg.classes,), "0")]
    params = {}
    for name, shape, kind in shapes:
        if kind == "w":
            arr = trunc_normal(rng, shape, std)
        elif kind == "1":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def is_bias(name):
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b")


def is_head(name):
    return name.startswith("head.")


@dataclass
class ForwardTrace:
    """Attention maps per layer, each shaped ``(batch, heads, seq, seq)``, and the logits."""

    attention: list = field(default_factory=list)
    logits: np.ndarray | None = None

    def map(self, layer, head, index=0):
        return self.attention[layer][index, head]


def patchify(images, cfg: ModelConfig):
    x = np.asarray(images, dtype=np.float64)
    s, p = cfg.image_side, cfg.patch_size
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim == 2 and x.shape[-1] == s * s and x.shape != (s, s):
        x = x.reshape(-1, s, s)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (s, s):
        raise ShapeError(f"images must be {s}x{s}, got {x.shape[1:]}")
    b, g = x.shape[0], s // p
    return x.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b, g * g, p * p)


def multi_head_attention(H, weights, heads, additive_bias=None, mask=None):
    """Scaled dot-product attention over ``heads`` heads, then the output projection.

    ``weights`` maps ``W_q, W_k, W_v, W_o`` (``d_model x d_model``) and ``b_q ..
    b_o`` to tensors. ``additive_bias`` is a tensor added to the scores (shape
    ``seq x seq`` or ``heads x seq x seq``); ``mask`` is the same but constant.
    Returns ``(output, attention maps)``.
    """
    squeeze = H.ndim == 2
    if squeeze:
        H = T.reshape(H, (1,) + H.shape)
    b, n, d = H.shape
    if d % heads:
        raise ShapeError("heads must divide the hidden size")
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(T.add_bias(H @ weights["W_q"], weights["b_q"]))
    k = split(T.add_bias(H @ weights["W_k"], weights["b_k"]))
    v = split(T.add_bias(H @ weights["W_v"], weights["b_v"]))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if additive_bias is not None:
        scores = T.add_bias(scores, T.as_tensor(additive_bias) if not isinstance(additive_bias, Tensor)
                            else additive_bias)
    attn = T.softmax_rows(scores, mask)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    out = T.add_bias(ctx @ weights["W_o"], weights["b_o"])
    maps = attn.data
    if squeeze:
        out = T.reshape(out, (n, d))
        maps = maps[0]
    return out, maps


class ViT:
    """Vision-transformer classifier holding its parameters by name."""

    def __init__(self, config: ModelConfig, params=None, attn_masks=None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        # constant per-layer additive attention biases (seq x seq, may hold -inf)
        self.attn_masks = dict(attn_masks or {})

    def named_parameters(self):
        return list(self.params.items())

    def trainable(self):
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def set_trainable(self, predicate):
        for name, t in self.params.items():
            t.requires_grad = bool(predicate(name))

    def num_parameters(self):
        return sum(t.size for t in self.params.values())

    def clone(self):
        params = {}
        for k, v in self.params.items():
            params[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
        masks = {k: np.array(v, copy=True) for k, v in self.attn_masks.items()}
        return ViT(self.config, params, masks)

    def forward(self, images, weights=None, attn_biases=None, sublayer_hook=None, trace=True):
        """Return ``(logits, ForwardTrace)`` for a batch of images.

        ``weights`` overrides named parameters (missing names fall back to the
        model's own). ``attn_biases`` maps layer index to a trainable additive
        bias. ``sublayer_hook(layer, kind, out)`` may rewrite each sublayer output.
        """
        cfg = self.config
        w = self.params if weights is None else {**self.params, **weights}
        patches = Tensor(patchify(images, cfg))
        bsz = patches.shape[0]
        tokens = T.add_bias(patches @ w["patch.W"], w["patch.b"])
        x = T.concat([Tensor(np.zeros((bsz, 1, cfg.d_model))), tokens], axis=1)
        lead = T.concat([T.reshape(w["cls"], (1, cfg.d_model)),
                         Tensor(np.zeros((cfg.num_patches, cfg.d_model)))], axis=0)
        x = T.add_bias(x, lead + w["pos"])
        record = ForwardTrace()
        for l in range(cfg.layers):
            pre = layer_prefix(l)
            a = T.layer_norm(x, w[f"{pre}.ln1.g"], w[f"{pre}.ln1.b"])
            aw = {role: w[attn_name(l, role)] for role in ATTN_ROLES}
            aw.update({_ROLE_BIAS[r]: w[attn_bias_name(l, r)] for r in ATTN_ROLES})
            bias = attn_biases.get(l) if attn_biases else None
            out, maps = multi_head_attention(a, aw, cfg.heads, bias, self.attn_masks.get(l))
            if trace:
                record.attention.append(maps)
            if sublayer_hook is not None:
                out = sublayer_hook(l, "attn", out)
            x = x + out
            m = T.layer_norm(x, w[f"{pre}.ln2.g"], w[f"{pre}.ln2.b"])
            hdn = T.gelu(T.add_bias(m @ w[f"{pre}.mlp.W1"], w[f"{pre}.mlp.b1"]))
            out = T.add_bias(hdn @ w[f"{pre}.mlp.W2"], w[f"{pre}.mlp.b2"])
            if sublayer_hook is not None:
                out = sublayer_hook(l, "mlp", out)
            x = x + out
        x = T.layer_norm(x, w["ln_f.g"], w["ln_f.b"])
        logits = T.add_bias(x[:, 0, :] @ w["head.W"], w["head.b"])
        record.logits = logits.data
        return logits, record

    __call__ = forward


def vit_forward(image, model, **kwargs):
    """Forward a single image (or a batch); returns ``(logits, trace)``."""
    single = np.asarray(image).ndim == 1 or np.asarray(image).shape == (model.config.image_side,) * 2
    logits, trace = model.forward(image, **kwargs)
    if single:
        logits = logits[0]
        trace.logits = trace.logits[0]
    return logits, trace


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: ViT, directory):
    """Write ``manifest.txt`` plus one little-endian float64 blob per tensor."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["format=attnforge-checkpoint-1"]
    lines += [f"config.{k}={v}" for k, v in asdict(model.config).items()]
    entries = [(name, t.data, t.requires_grad) for name, t in model.params.items()]
    entries += [(f"attn_mask.{l}", np.asarray(m), False) for l, m in sorted(model.attn_masks.items())]
    for i, (name, arr, trainable) in enumerate(entries):
        fname = f"t{i:04d}.f64"
        np.ascontiguousarray(arr, dtype="<f8").tofile(out / fname)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor={name};shape={shape};file={fname};trainable={int(trainable)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> ViT:
    src = Path(directory)
    cfg_fields, params, masks = {}, {}, {}
    types = {f: type(getattr(ModelConfig(), f)) for f in ModelConfig.__dataclass_fields__}
    for raw in (src / "manifest.txt").read_text().splitlines():
        if not raw.strip():
            continue
        key, _, val = raw.partition("=")
        if key.startswith("config."):
            name = key[len("config."):]
            cfg_fields[name] = types[name](val)
        elif key == "tensor":
            parts = dict(p.split("=", 1) for p in raw[len("tensor="):].split(";")[1:])
            name = raw[len("tensor="):].split(";")[0]
            shape = () if parts["shape"] == "scalar" else tuple(int(s) for s in parts["shape"].split("x"))
            arr = np.fromfile(src / parts["file"], dtype="<f8").reshape(shape)
            if name.startswith("attn_mask."):
                masks[int(name.split(".")[1])] = arr
            else:
                params[name] = Tensor(arr, requires_grad=parts.get("trainable") == "1", name=name)
    return ViT(ModelConfig(**cfg_fields), params, masks)
