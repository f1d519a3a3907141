"""Parameter-efficient adaptation methods over a frozen :class:`~attnforge.transformer.ViT`.

Weight-delta methods (LoRA, LoRA-Fix, KAdaptation) add a structured update to
chosen attention matrices; bottleneck methods (Adapter, AdapterDrop,
Compacter) insert small residual MLPs after the attention and MLP sublayers;
BitFit unfreezes biases; RPB adds a trainable attention bias per layer. The
classifier head is trainable under every method.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ContractError, FormulaInapplicableError
from .tensor import Tensor
from .transformer import ATTN_ROLES, ViT, attn_name, is_bias, is_head, trunc_normal

METHODS = ("FullFT", "LinearProbe", "BitFit", "Adapter", "AdapterDrop", "LoRA", "LoRAFix",
           "Compacter", "KAdaptation", "RPB")
MERGEABLE = {"FullFT", "LinearProbe", "BitFit", "LoRA", "LoRAFix", "KAdaptation", "RPB"}


@dataclass(frozen=True)
class AdapterSpec:
    method: str
    targets: tuple = ("W_q", "W_v")
    d_bottleneck: int = 64
    r: int = 4
    n: int = 4
    with_bias: bool = False
    # KAdaptation: one slow-weight set for every target role, or one per role.
    share_roles: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown adaptation method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "targets", tuple(self.targets))
        bad = [t for t in self.targets if t not in ATTN_ROLES]
        if bad or not self.targets:
            raise ValueError(f"targets must be a non-empty subset of {ATTN_ROLES}, got {self.targets}")
        if self.r < 1 or self.n < 1 or self.d_bottleneck < 1:
            raise ValueError("r, n and d_bottleneck must be >= 1")


@dataclass
class KAdaptState:
    """Shared slow weights and per-(layer, role) rank-``r`` fast factors."""

    n: int
    r: int
    slow: dict                      # role key ("*" when shared) -> list of n (n x n) tensors
    u: dict = field(default_factory=dict)     # (layer, role) -> list of (k/n x r) tensors
    v: dict = field(default_factory=dict)     # (layer, role) -> list of (r x d/n) tensors
    bias: dict = field(default_factory=dict)  # (layer, role) -> (d,) tensor

    def slow_for(self, role):
        return self.slow["*"] if "*" in self.slow else self.slow[role]


def kadapt_delta(state: KAdaptState, layer, target):
    """``sum_i A_i kron (u_i @ v_i)`` for one adapted matrix."""
    slow = state.slow_for(target)
    us, vs = state.u[(layer, target)], state.v[(layer, target)]
    delta = None
    for a, u, v in zip(slow, us, vs):
        term = T.kron(a, u @ v)
        delta = term if delta is None else delta + term
    return delta


def kron_delta(slow, fast):
    """``sum_i H_i kron F_i`` for explicit factor lists."""
    out = None
    for h, f in zip(slow, fast):
        term = T.kron(h, f)
        out = term if out is None else out + term
    return out


def _param(rng, shape, std, name, trainable=True):
    return Tensor(trunc_normal(rng, shape, std), requires_grad=trainable, name=name)


def _zeros(shape, name, trainable=True):
    return Tensor(np.zeros(shape), requires_grad=trainable, name=name)


class AdaptedModel:
    """A frozen base transformer plus the trainable tensors of one adaptation method."""

    def __init__(self, spec: AdapterSpec, base: ViT):
        self.spec = spec
        self.base = base
        self.delta = {}
        self.kstate = None
        self.rpb = {}
        self.adapter_layers = ()
        self._compacter_slow = None

    # -- construction helpers live in instantiate()

    @property
    def config(self):
        return self.base.config

    def trainable(self):
        out = {k: v for k, v in self.base.params.items() if v.requires_grad}
        out.update({k: v for k, v in self.delta.items() if v.requires_grad})
        return out

    def frozen(self):
        out = {k: v for k, v in self.base.params.items() if not v.requires_grad}
        out.update({k: v for k, v in self.delta.items() if not v.requires_grad})
        return out

    def weight_delta(self, layer, role):
        m = self.spec.method
        if m in ("LoRA", "LoRAFix") and role in self.spec.targets:
            return self.delta[f"lora.{layer}.{role}.A"] @ self.delta[f"lora.{layer}.{role}.B"]
        if m == "KAdaptation" and role in self.spec.targets:
            return kadapt_delta(self.kstate, layer, role)
        return None

    def effective_weights(self):
        w = {}
        for l in range(self.config.layers):
            for role in self.spec.targets:
                d = self.weight_delta(l, role)
                if d is None:
                    continue
                name = attn_name(l, role)
                w[name] = self.base.params[name] + d
                if (l, role) in (self.kstate.bias if self.kstate else {}):
                    bname = name.replace(".W_", ".b_")
                    w[bname] = self.base.params[bname] + self.kstate.bias[(l, role)]
        return w

    def _bottleneck_weights(self, layer, kind):
        if self.spec.method == "Compacter":
            slow = self._compacter_slow
            pre = f"compacter.{layer}.{kind}"
            n = self.spec.n
            down = kron_delta(slow, [self.delta[f"{pre}.down.s{i}"] @ self.delta[f"{pre}.down.t{i}"]
                                     for i in range(n)])
            up = kron_delta(slow, [self.delta[f"{pre}.up.s{i}"] @ self.delta[f"{pre}.up.t{i}"]
                                   for i in range(n)])
            return down, up
        pre = f"adapter.{layer}.{kind}"
        return self.delta[f"{pre}.down"], self.delta[f"{pre}.up"]

    def _hook(self, layer, kind, out):
        if layer not in self.adapter_layers:
            return out
        down, up = self._bottleneck_weights(layer, kind)
        return out + T.gelu(out @ down) @ up

    def forward(self, images, trace=True):
        hook = self._hook if self.adapter_layers else None
        return self.base.forward(images, weights=self.effective_weights(), attn_biases=self.rpb or None,
                                 sublayer_hook=hook, trace=trace)

    __call__ = forward


def _check_divisible(spec, cfg):
    n = spec.n
    if spec.method == "KAdaptation" and cfg.d_model % n:
        raise ValueError(f"n={n} must divide d_model={cfg.d_model}")
    if spec.method == "Compacter" and (cfg.d_model % n or spec.d_bottleneck % n):
        raise ValueError(f"n={n} must divide d_model={cfg.d_model} and d_bottleneck={spec.d_bottleneck}")


def instantiate(spec: AdapterSpec, model: ViT) -> AdaptedModel:
    """Wrap a copy of ``model`` with the trainable tensors ``spec`` calls for."""
    cfg = model.config
    _check_divisible(spec, cfg)
    base = model.clone()
    rng = np.random.default_rng(spec.seed)
    m = spec.method
    if m == "FullFT":
        base.set_trainable(lambda name: True)
    elif m == "BitFit":
        base.set_trainable(lambda name: is_bias(name) or is_head(name))
    else:
        base.set_trainable(is_head)
    am = AdaptedModel(spec, base)
    d = cfg.d_model
    L = cfg.layers

    if m in ("LoRA", "LoRAFix"):
        for l in range(L):
            for role in spec.targets:
                pre = f"lora.{l}.{role}"
                am.delta[f"{pre}.A"] = _param(rng, (d, spec.r), 1.0 / math.sqrt(d), f"{pre}.A",
                                              trainable=(m == "LoRA"))
                am.delta[f"{pre}.B"] = _zeros((spec.r, d), f"{pre}.B")
    elif m == "KAdaptation":
        n, r = spec.n, spec.r
        keys = ["*"] if spec.share_roles else list(spec.targets)
        slow = {}
        for key in keys:
            tag = "" if key == "*" else f"{key}."
            slow[key] = [_param(rng, (n, n), 1.0 / math.sqrt(n), f"kadapt.slow.{tag}{i}") for i in range(n)]
            for i, t in enumerate(slow[key]):
                am.delta[t.name] = t
        st = KAdaptState(n=n, r=r, slow=slow)
        for l in range(L):
            for role in spec.targets:
                pre = f"kadapt.{l}.{role}"
                st.u[(l, role)] = [_zeros((d // n, r), f"{pre}.u{i}") for i in range(n)]
                st.v[(l, role)] = [_param(rng, (r, d // n), 1.0 / math.sqrt(r), f"{pre}.v{i}")
                                   for i in range(n)]
                for t in st.u[(l, role)] + st.v[(l, role)]:
                    am.delta[t.name] = t
                if spec.with_bias:
                    st.bias[(l, role)] = _zeros((d,), f"{pre}.bias")
                    am.delta[f"{pre}.bias"] = st.bias[(l, role)]
        am.kstate = st
    elif m in ("Adapter", "AdapterDrop"):
        db = spec.d_bottleneck
        am.adapter_layers = tuple(range(L)) if m == "Adapter" else (L - 1,)
        for l in am.adapter_layers:
            for kind in ("attn", "mlp"):
                pre = f"adapter.{l}.{kind}"
                am.delta[f"{pre}.down"] = _param(rng, (d, db), 1.0 / math.sqrt(d), f"{pre}.down")
                am.delta[f"{pre}.up"] = _zeros((db, d), f"{pre}.up")
    elif m == "Compacter":
        n, db = spec.n, spec.d_bottleneck
        am.adapter_layers = tuple(range(L))
        am._compacter_slow = [_param(rng, (n, n), 1.0 / math.sqrt(n), f"compacter.slow.{i}") for i in range(n)]
        for t in am._compacter_slow:
            am.delta[t.name] = t
        for l in range(L):
            for kind in ("attn", "mlp"):
                pre = f"compacter.{l}.{kind}"
                for i in range(n):
                    am.delta[f"{pre}.down.s{i}"] = _param(rng, (d // n, 1), 1.0, f"{pre}.down.s{i}")
                    am.delta[f"{pre}.down.t{i}"] = _param(rng, (1, db // n), 1.0 / math.sqrt(d), f"{pre}.down.t{i}")
                    am.delta[f"{pre}.up.s{i}"] = _param(rng, (db // n, 1), 1.0, f"{pre}.up.s{i}")
                    am.delta[f"{pre}.up.t{i}"] = _zeros((1, d // n), f"{pre}.up.t{i}")
    elif m == "RPB":
        for l in range(L):
            am.rpb[l] = _zeros((cfg.seq_len, cfg.seq_len), f"rpb.{l}")
            am.delta[f"rpb.{l}"] = am.rpb[l]
    return am


def merge(model: AdaptedModel) -> ViT:
    """Fold weight deltas (and RPB biases) into a plain transformer."""
    if model.spec.method not in MERGEABLE:
        raise ContractError(f"{model.spec.method} inserts layers at inference time and cannot be merged")
    merged = model.base.clone()
    with T.no_grad():
        for name, t in model.effective_weights().items():
            merged.params[name] = Tensor(t.data.copy(), requires_grad=False, name=name)
    for l, bias in model.rpb.items():
        prev = merged.attn_masks.get(l)
        merged.attn_masks[l] = bias.data.copy() if prev is None else prev + bias.data
    merged.set_trainable(lambda name: False)
    return merged


# ---------------------------------------------------------------- parameter counts

@dataclass
class ParamReport:
    exact_count: int
    closed_form_count: int | None
    breakdown: list

    def as_dict(self):
        return {"exact_count": self.exact_count, "closed_form_count": self.closed_form_count,
                "breakdown": [list(x) for x in self.breakdown]}


def closed_form_count(spec, L, k=None, d=None, d_model=None, r=None, n=None):
    """Trainable-parameter count from the published closed-form table.

    Adapter ``4Lkd``; LoRA ``2 L r d_model``; Compacter ``4L(k/n + d/n) + n^3``;
    KAdaptation ``2L((d_model + r)/n) + n^3``. Each quotient counts the
    elements of one factor, so a non-integer quotient (or total) raises
    :class:`FormulaInapplicableError` rather than being rounded.
    """
    method = spec.method if isinstance(spec, AdapterSpec) else str(spec)
    F = Fraction

    def whole(q, what):
        if q.denominator != 1:
            raise FormulaInapplicableError(f"{method} closed form: {what} = {float(q):.4f} is not an integer")
        return q

    if method in ("Adapter", "AdapterDrop"):
        val = 4 * F(L) * k * d
    elif method == "LoRA":
        val = 2 * F(L) * r * d_model
    elif method == "Compacter":
        val = 4 * F(L) * (whole(F(k, n), "k/n") + whole(F(d, n), "d/n")) + F(n) ** 3
    elif method == "KAdaptation":
        val = 2 * F(L) * whole(F(d_model + r, n), "(d_model + r)/n") + F(n) ** 3
    else:
        raise FormulaInapplicableError(f"no closed-form count is tabulated for {method}")
    if val.denominator != 1:
        raise FormulaInapplicableError(f"{method} closed form evaluates to non-integer {float(val):.4f}")
    return int(val)


def closed_form_for_model(model: AdaptedModel):
    """Closed-form count with symbols taken from the model, or ``None`` when inapplicable."""
    s, cfg = model.spec, model.config
    L = len(model.adapter_layers) if s.method in ("Adapter", "AdapterDrop") else cfg.layers
    try:
        return closed_form_count(s, L, k=cfg.d_model, d=s.d_bottleneck, d_model=cfg.d_model, r=s.r, n=s.n)
    except FormulaInapplicableError:
        return None


def exact_param_count(model: AdaptedModel, include_head=False) -> ParamReport:
    items = [(name, t.size) for name, t in model.trainable().items() if include_head or not is_head(name)]
    items.sort()
    return ParamReport(sum(s for _, s in items), closed_form_for_model(model), items)
