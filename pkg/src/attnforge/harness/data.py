"""Deterministic synthetic image-classification datasets.

Each generator renders ``image_side x image_side`` grayscale images and has
a decision rule (``recover_label``) that is exact on noise-free labels, so
the Bayes-optimal accuracy is known:

* ``stripes``: class ``c`` is a sinusoidal grating at angle ``c * pi / C``.
* ``checker``: class ``c`` is a checkerboard whose cell side is the ``c``-th
  proper power-of-two divisor of the image side.
* ``blob-count``: class ``c`` shows ``c + 1`` separated Gaussian blobs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

GENERATORS = ("stripes", "checker", "blob-count")
SPLITS = ("train", "val", "test")
PIXEL_NOISE = 0.1
STRIPE_FREQS = (2, 3)
BLOB_SIGMA = 1.0
# 3x3 box blur of a unit Gaussian bump (sigma 1) at its integer-valued centre
BLOB_PEAK_BLURRED = (1 + 4 * np.exp(-0.5) + 4 * np.exp(-1.0)) / 9.0


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "stripes"
    image_side: int = 16
    classes: int = 2
    train: int = 500
    val: int = 100
    test: int = 200
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("split sizes must be >= 1")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must lie in [0, 1]")
        if self.generator == "checker" and self.classes > len(checker_sizes(self.image_side)):
            raise ValueError(f"checker supports at most {len(checker_sizes(self.image_side))} classes "
                             f"at image_side={self.image_side}")
        if self.generator == "blob-count" and self.classes > max_blobs(self.image_side):
            raise ValueError(f"blob-count supports at most {max_blobs(self.image_side)} classes "
                             f"at image_side={self.image_side}")

    def size(self, split):
        return getattr(self, split)


@dataclass
class Dataset:
    spec: DatasetSpec
    images: dict      # split -> (n, side, side)
    labels: dict      # split -> (n,) int64

    def split(self, name):
        return self.images[name], self.labels[name]


# ---------------------------------------------------------------- renderers

def _grid(side):
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    return xs, ys


def render_stripes(label, classes, side, rng):
    xs, ys = _grid(side)
    ang = label * np.pi / classes
    freq = STRIPE_FREQS[rng.integers(len(STRIPE_FREQS))]
    phase = rng.uniform(0, 2 * np.pi)
    proj = xs * np.cos(ang) + ys * np.sin(ang)
    return np.sin(2 * np.pi * freq * proj / side + phase)


def checker_sizes(side):
    out, s = [], 1
    while s < side:
        if side % s == 0:
            out.append(s)
        s *= 2
    return out


def _checker(side, cell, ox, oy):
    xs, ys = _grid(side)
    return np.where(((xs + ox) // cell + (ys + oy) // cell) % 2 == 0, 1.0, -1.0)


def render_checker(label, classes, side, rng):
    cell = checker_sizes(side)[label]
    ox, oy = rng.integers(cell), rng.integers(cell)
    sign = rng.choice([-1.0, 1.0])
    return sign * _checker(side, cell, ox, oy)


def max_blobs(side):
    return max(1, (side // 5) ** 2)


def _blob_centers(count, side, rng):
    centers = []
    margin, sep = 2, 4.5
    for _ in range(10000):
        if len(centers) == count:
            break
        c = rng.integers(margin, side - margin, size=2)
        if all(np.hypot(*(c - o)) >= sep for o in centers):
            centers.append(c)
    if len(centers) < count:
        raise RuntimeError(f"could not place {count} separated blobs on a {side}x{side} image")
    return np.array(centers, dtype=np.float64)


def render_blobs(label, classes, side, rng):
    xs, ys = _grid(side)
    img = np.zeros((side, side))
    for cx, cy in _blob_centers(label + 1, side, rng):
        img += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * BLOB_SIGMA ** 2))
    return img


_RENDER = {"stripes": render_stripes, "checker": render_checker, "blob-count": render_blobs}


# ---------------------------------------------------------------- decision rules

def _stripe_residual(img, ang, freq):
    side = img.shape[0]
    xs, ys = _grid(side)
    proj = (xs * np.cos(ang) + ys * np.sin(ang)) * 2 * np.pi * freq / side
    basis = np.stack([np.ones(side * side), np.sin(proj).ravel(), np.cos(proj).ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(basis, img.ravel(), rcond=None)
    r = img.ravel() - basis @ coef
    return float(r @ r)


def count_blobs(img, threshold=0.5):
    """Peaks above ``threshold`` after a 3x3 box blur, with 5x5 non-maximum suppression."""
    side = img.shape[0]
    p = np.pad(img, 1, mode="edge")
    blur = sum(p[1 + dy:1 + dy + side, 1 + dx:1 + dx + side] for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    q = np.pad(blur, 2, constant_values=-np.inf)
    neigh = np.stack([q[2 + dy:2 + dy + side, 2 + dx:2 + dx + side]
                      for dy in range(-2, 3) for dx in range(-2, 3) if dy or dx])
    return int(np.sum((blur > threshold * BLOB_PEAK_BLURRED) & (blur > neigh.max(axis=0))))


def recover_label(img, generator, classes):
    """The generator's own decision rule (exact on noise-free labels)."""
    img = np.asarray(img, dtype=np.float64)
    side = img.shape[0]
    if generator == "stripes":
        res = [min(_stripe_residual(img, c * np.pi / classes, f) for f in STRIPE_FREQS) for c in range(classes)]
        return int(np.argmin(res))
    if generator == "checker":
        best = []
        for c, cell in enumerate(checker_sizes(side)[:classes]):
            best.append(max(abs(float((img * _checker(side, cell, ox, oy)).sum()))
                            for ox in range(cell) for oy in range(cell)))
        return int(np.argmax(best))
    if generator == "blob-count":
        return int(np.clip(count_blobs(img) - 1, 0, classes - 1))
    raise ValueError(f"unknown generator {generator!r}")


# ---------------------------------------------------------------- generation and IO

def generate(spec: DatasetSpec) -> Dataset:
    images, labels = {}, {}
    render = _RENDER[spec.generator]
    for k, split in enumerate(SPLITS):
        n = spec.size(split)
        rng = np.random.default_rng([spec.seed, k])
        y = rng.permutation(np.arange(n) % spec.classes).astype(np.int64)
        x = np.empty((n, spec.image_side, spec.image_side))
        for i in range(n):
            x[i] = render(int(y[i]), spec.classes, spec.image_side, rng)
        x += PIXEL_NOISE * rng.standard_normal(x.shape)
        flips = int(round(spec.label_noise * n))
        if flips:
            idx = rng.choice(n, size=flips, replace=False)
            y[idx] = (y[idx] + rng.integers(1, spec.classes, size=flips)) % spec.classes
        images[split], labels[split] = x, y
    return Dataset(spec, images, labels)


def write_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in asdict(ds.spec).items()]
    for split in SPLITS:
        x, y = ds.split(split)
        np.ascontiguousarray(x, dtype="<f8").tofile(out / f"{split}_images.f64")
        np.ascontiguousarray(y, dtype="<i8").tofile(out / f"{split}_labels.i64")
        lines.append(f"{split}_images={split}_images.f64")
        lines.append(f"{split}_labels={split}_labels.i64")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def read_dataset(path) -> Dataset:
    src = Path(path)
    if not (src / "manifest.txt").exists():
        raise FileNotFoundError(f"no dataset manifest in {src}")
    fields = dict(line.split("=", 1) for line in (src / "manifest.txt").read_text().splitlines() if "=" in line)
    types = {k: type(v) for k, v in asdict(DatasetSpec()).items()}
    spec = DatasetSpec(**{k: types[k](fields[k]) for k in types})
    images, labels = {}, {}
    side = spec.image_side
    for split in SPLITS:
        images[split] = np.fromfile(src / fields[f"{split}_images"], dtype="<f8").reshape(-1, side, side)
        labels[split] = np.fromfile(src / fields[f"{split}_labels"], dtype="<i8").astype(np.int64)
    return Dataset(spec, images, labels)


def few_shot(images, labels, shots, classes):
    """First ``shots`` examples of every class, in original order."""
    keep = np.concatenate([np.flatnonzero(labels == c)[:shots] for c in range(classes)])
    keep.sort()
    return images[keep], labels[keep]
