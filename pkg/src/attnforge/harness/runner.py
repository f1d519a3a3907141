"""Training runs, reports, comparisons and intrinsic-dimension sweeps."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..errors import DegenerateRowError
from ..peft import AdapterSpec, closed_form_for_model, exact_param_count, instantiate
from ..subspace import IdentityProjection, attach_subspace, build_projection, group_names, intrinsic_dim_search
from ..transformer import ViT
from .config import RunConfig
from .data import few_shot, read_dataset
from .optim import make_optimizer

M0 = 1e8
CSV_HEADER = ["method", "accuracy", "exact_params", "closed_form_params", "pe", "seconds"]


class TrainingDivergedError(RuntimeError):
    pass


def pe_metric(score, params, M0=M0):
    """``score * exp(-log10(params / M0 + 1))`` with ``score`` as a fraction.

    Scores above 1 are read as percentages and divided by 100.
    """
    if params < 0:
        raise ValueError("parameter count must be nonnegative")
    s = float(score)
    if s > 1.0:
        s /= 100.0
    return s * math.exp(-math.log10(params / M0 + 1.0))


@dataclass
class RunReport:
    method: str
    accuracy: float
    exact_params: int
    closed_form_params: int | None
    pe: float
    seconds: float
    seed: int
    config: dict = field(default_factory=dict)
    initial_accuracy: float = 0.0
    final_loss: float | None = None
    params_sha256: str = ""

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)

    def content_hash(self):
        """Hash of everything except wall time."""
        d = self.to_json()
        d.pop("seconds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate(module, images, labels, batch_size=256):
    correct = 0
    with T.no_grad():
        for i in range(0, len(labels), batch_size):
            logits, _ = module.forward(images[i:i + batch_size], trace=False)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[i:i + batch_size]))
    return correct / len(labels)


def fit(module, images, labels, optim_cfg, epochs, batch_size, seed):
    """Minimize cross-entropy over ``module.trainable()``; returns the last batch loss."""
    params = module.trainable()
    opt = make_optimizer(optim_cfg, params)
    rng = np.random.default_rng([seed, 1])
    loss_val = None
    for epoch in range(epochs):
        for idx in _batches(len(labels), batch_size, rng):
            try:
                logits, _ = module.forward(images[idx], trace=False)
            except DegenerateRowError as exc:
                if loss_val is None:
                    raise
                # attention scores overflowed to -inf after an update
                raise TrainingDivergedError(f"forward pass overflowed in epoch {epoch}; lower optimizer.lr "
                                            f"(currently {optim_cfg.lr})") from exc
            loss = T.cross_entropy(logits, labels[idx])
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"loss became {loss_val} in epoch {epoch}; lower optimizer.lr "
                    f"(currently {optim_cfg.lr}) or switch optimizer")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                raise TrainingDivergedError(
                    f"parameters overflowed in epoch {epoch}; lower optimizer.lr (currently {optim_cfg.lr})")
    return loss_val


def params_digest(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


def _train_split(ds, cfg: RunConfig):
    x, y = ds.split("train")
    if cfg.train.shots:
        x, y = few_shot(x, y, cfg.train.shots, ds.spec.classes)
    return x, y


def _check_data(ds, cfg: RunConfig):
    if ds.spec.image_side != cfg.model.image_side or ds.spec.classes != cfg.model.classes:
        raise ValueError(f"dataset ({ds.spec.image_side}px, {ds.spec.classes} classes) does not match "
                         f"model ({cfg.model.image_side}px, {cfg.model.classes} classes)")


def train(cfg: RunConfig, dataset=None) -> RunReport:
    """Train the configured adaptation method and evaluate on the test split."""
    ds = dataset if dataset is not None else read_dataset(cfg.data_path)
    _check_data(ds, cfg)
    start = time.perf_counter()
    model = instantiate(cfg.adapter, ViT(cfg.model))
    x, y = _train_split(ds, cfg)
    xt, yt = ds.split("test")
    initial = evaluate(model, xt, yt)
    loss = fit(model, x, y, cfg.optimizer, cfg.train.epochs, cfg.train.batch_size, cfg.train.seed)
    acc = evaluate(model, xt, yt) if cfg.train.epochs else initial
    counts = exact_param_count(model, include_head=True)
    return RunReport(
        method=cfg.adapter.method, accuracy=acc, exact_params=counts.exact_count,
        closed_form_params=closed_form_for_model(model), pe=pe_metric(acc, counts.exact_count),
        seconds=time.perf_counter() - start, seed=cfg.train.seed, config=cfg.echo(),
        initial_accuracy=initial, final_loss=loss, params_sha256=params_digest(model.trainable()),
    )


def write_report(report: RunReport, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def read_report(path) -> RunReport:
    return RunReport.from_json(json.loads(Path(path).read_text()))


def rank_reports(reports):
    return sorted(reports, key=lambda r: (-r.pe, r.method))


def compare(reports, out_prefix):
    """Write ``<prefix>.csv`` and ``<prefix>.json``, rows sorted by PE (ties by method)."""
    if not reports:
        raise ValueError("compare needs at least one report")
    rows = []
    for r in rank_reports(reports):
        rows.append({"method": r.method, "accuracy": r.accuracy, "exact_params": r.exact_params,
                     "closed_form_params": "" if r.closed_form_params is None else r.closed_form_params,
                     "pe": r.pe, "seconds": r.seconds})
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    json_rows = [{**row, "closed_form_params": row["closed_form_params"] or None} for row in rows]
    json_path = prefix.with_name(prefix.name + ".json")
    json_path.write_text(json.dumps(json_rows, indent=2) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------- intrinsic dimension

def parse_group(text):
    """``"attention:0"``, ``"mlp:0,1"`` or ``"all"`` -> ``(kind, layers)``."""
    kind, _, layers = str(text).partition(":")
    if not layers or layers == "all":
        return kind, "all"
    return kind, [int(x) for x in layers.split(",")]


def sweep_intrinsic(cfg: RunConfig, group, d_grid, threshold=0.9, dataset=None, train_head=False):
    """Grid search for the local intrinsic dimension of ``group``.

    The reference is full fine-tuning under the same optimizer and epoch
    budget; every grid point is a fresh subspace run. Accuracies are measured
    on the held-out validation split. The classifier head stays at its random
    initialization unless ``train_head``.
    """
    ds = dataset if dataset is not None else read_dataset(cfg.data_path)
    _check_data(ds, cfg)
    group = parse_group(group) if isinstance(group, str) else group
    x, y = _train_split(ds, cfg)
    xv, yv = ds.split("val")
    base = ViT(cfg.model)
    ref_model = instantiate(AdapterSpec("FullFT", seed=cfg.train.seed), base)
    fit(ref_model, x, y, cfg.optimizer, cfg.train.epochs, cfg.train.batch_size, cfg.train.seed)
    reference = evaluate(ref_model, xv, yv)
    D = sum(base.params[n].size for n in group_names(base, *group))

    def run(d):
        proj = IdentityProjection(D) if d == D else build_projection(D, d, seed=cfg.train.seed)
        handle = attach_subspace(base, group, proj, train_head=train_head)
        fit(handle, x, y, cfg.optimizer, cfg.train.epochs, cfg.train.batch_size, cfg.train.seed)
        return evaluate(handle, xv, yv)

    result = intrinsic_dim_search(run, reference, d_grid, threshold)
    return {
        "group": {"kind": group[0], "layers": group[1]},
        "ambient_dim": D,
        "metric": "validation accuracy",
        "reference_accuracy": reference,
        "threshold": threshold,
        "train_head": train_head,
        "rows": [{"d": d, "accuracy": a, "qualified": q} for d, a, q in result.rows],
        "d_t": result.d_t,
        "config": cfg.echo(),
    }
