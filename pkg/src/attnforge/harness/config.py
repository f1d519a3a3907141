"""Line-oriented ``section.key = value`` configuration files."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..peft import AdapterSpec
from ..transformer import ModelConfig
from .data import DatasetSpec

SEED_ENV = "ATTNFORGE_SEED"


def parse_value(raw):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config_text(text):
    """``{section: {key: value}}`` from ``section.key = value`` lines (``#`` comments)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise ValueError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = parse_value(value)
    return out


def read_config(path):
    return parse_config_text(Path(path).read_text())


def format_config(sections):
    lines = []
    for section, values in sections.items():
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{k} = {v}")
    return "\n".join(lines) + "\n"


def _build(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**values)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self):
        if self.name not in ("sgd", "adamw"):
            raise ValueError("optimizer.name must be 'sgd' or 'adamw'")
        if self.lr <= 0:
            raise ValueError("optimizer.lr must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    shots: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    adapter: AdapterSpec
    optimizer: OptimizerConfig
    train: TrainConfig
    data_path: str = ""
    output_path: str = ""

    @property
    def seed(self):
        return self.train.seed

    def echo(self):
        """Every resolved field, as nested plain data."""
        adapter = asdict(self.adapter)
        adapter["targets"] = list(adapter["targets"])
        return {"model": asdict(self.model), "adapter": adapter, "optimizer": asdict(self.optimizer),
                "train": asdict(self.train), "data": {"path": self.data_path},
                "output": {"path": self.output_path}}

    def to_text(self):
        return format_config(self.echo())


def run_config_from_sections(sections, env=None):
    env = os.environ if env is None else env
    s = {k: dict(v) for k, v in sections.items()}
    train = dict(s.get("train", {}))
    if env.get(SEED_ENV):
        train["seed"] = int(env[SEED_ENV])
    adapter = dict(s.get("adapter", {}))
    if "method" not in adapter:
        raise ValueError("adapter.method is required")
    if "targets" in adapter:
        adapter["targets"] = tuple(t.strip() for t in str(adapter["targets"]).split(",") if t.strip())
    train_cfg = _build(TrainConfig, train, "train")
    adapter["seed"] = train_cfg.seed
    unknown = set(s) - {"model", "adapter", "optimizer", "train", "data", "output"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(
        model=_build(ModelConfig, s.get("model", {}), "model"),
        adapter=_build(AdapterSpec, adapter, "adapter"),
        optimizer=_build(OptimizerConfig, s.get("optimizer", {}), "optimizer"),
        train=train_cfg,
        data_path=str(s.get("data", {}).get("path", "")),
        output_path=str(s.get("output", {}).get("path", "")),
    )


def load_run_config(path, env=None):
    return run_config_from_sections(read_config(path), env)


def load_dataset_spec(path):
    sections = read_config(path)
    values = dict(sections.get("data", {}))
    for k, v in sections.items():
        if k != "data":
            raise ValueError(f"dataset spec files only take 'data.*' keys, got section {k!r}")
    return _build(DatasetSpec, values, "data")
