"""Dataset containers and readers/writers.

Supported sources:

* CIFAR-10 binary batches (3073-byte records: label byte, then 1024 bytes
  per R/G/B plane, row-major);
* a directory of 8-bit PNGs plus ``labels.csv`` (``filename,label``);
* a raw float directory (``images.f64`` little-endian float64 in NCHW order,
  ``images.json`` with the shape, ``labels.csv``), as written by the
  corruption command for exact evaluation;
* ``synthetic:key=value,...`` for the built-in seeded 10-class shapes set.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
DATA_ENV = "ATMOSCONV_DATA_DIR"
SHAPE_CLASSES = ("disk", "square", "triangle", "plus", "ring",
                 "hstripes", "vstripes", "dstripes", "xcross", "frame")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int = 10
    names: Optional[list] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        names = [self.names[i] for i in idx] if self.names else None
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, names)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels.copy(), self.num_classes, self.names)


# ---------------------------------------------------------------------------
# synthetic shapes


def _shape_mask(cls: int, yy: np.ndarray, xx: np.ndarray, s: float, rng) -> np.ndarray:
    r = np.hypot(yy, xx)
    if cls == 0:
        return r <= s
    if cls == 1:
        return np.maximum(abs(yy), abs(xx)) <= 0.8 * s
    if cls == 2:
        return (yy <= 0.7 * s) & (yy >= -0.9 * s + 2.0 * abs(xx))
    if cls == 3:
        t = 0.3 * s
        return ((abs(yy) <= t) & (abs(xx) <= s)) | ((abs(xx) <= t) & (abs(yy) <= s))
    if cls == 4:
        return (r <= s) & (r >= 0.55 * s)
    period = max(2.0, s * 0.6)
    phase = rng.uniform(0, period)
    box = np.maximum(abs(yy), abs(xx)) <= 1.1 * s
    if cls == 5:
        return box & (((yy + phase) % period) < period / 2)
    if cls == 6:
        return box & (((xx + phase) % period) < period / 2)
    if cls == 7:
        return box & (((xx + yy + phase) % (1.4 * period)) < 0.7 * period)
    if cls == 8:
        t = 0.3 * s
        return ((abs(yy - xx) <= t) | (abs(yy + xx) <= t)) & (np.maximum(abs(yy), abs(xx)) <= s)
    if cls == 9:
        m = np.maximum(abs(yy), abs(xx))
        return (m <= s) & (m >= 0.6 * s)
    raise ConfigError(f"no shape class {cls}")


def synthetic_shapes(n: int, seed: int = 0, size: int = 16, channels: int = 3,
                     num_classes: int = 10, bg_range: tuple = (0.05, 0.45),
                     contrast_range: tuple = (0.15, 0.4), noise: float = 0.02) -> Dataset:
    """Seeded procedural 10-class shapes set with balanced labels.

    Every image is a shape (class-defined mask, random centre jitter and
    scale) lighter or darker than a random background, with per-channel
    tint and Gaussian pixel noise, clipped to [0, 1].
    """
    if not 2 <= num_classes <= len(SHAPE_CLASSES):
        raise ConfigError(f"num_classes must be in [2, {len(SHAPE_CLASSES)}]")
    if n < 1 or size < 8:
        raise ConfigError("need n >= 1 and size >= 8")
    rng = np.random.default_rng([int(seed), 0x5A5E])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, channels, size, size))
    c = (size - 1) / 2.0
    grid = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(n):
        s = size * rng.uniform(0.22, 0.36)
        cy, cx = c + rng.uniform(-0.12, 0.12, size=2) * size
        mask = _shape_mask(int(labels[i]), grid[0] - cy, grid[1] - cx, s, rng).astype(np.float64)
        bg = rng.uniform(*bg_range)
        delta = rng.uniform(*contrast_range) * rng.choice((-1.0, 1.0))
        tint = 1.0 + rng.uniform(-0.15, 0.15, size=(channels, 1, 1))
        img = (bg + delta * mask)[None] * tint + rng.normal(0.0, noise, size=(channels, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, num_classes)


def parse_synthetic(spec: str) -> Dataset:
    """``synthetic:n=1000,seed=0,size=16,channels=3``."""
    body = spec.split(":", 1)[1] if ":" in spec else ""
    kw: dict = {}
    for part in filter(None, body.split(",")):
        if "=" not in part:
            raise ConfigError(f"bad synthetic option {part!r}")
        k, v = part.split("=", 1)
        if k not in ("n", "seed", "size", "channels", "num_classes"):
            raise ConfigError(f"unknown synthetic option {k!r}")
        kw[k] = int(v)
    return synthetic_shapes(**kw)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar_binary(path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ShapeError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return images, labels


def write_cifar_binary(path, images_u8: np.ndarray, labels) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    if images_u8.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ShapeError(f"CIFAR images must be (N, 3, 32, 32), got {images_u8.shape}")
    lab = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    np.concatenate([lab, images_u8.reshape(len(lab), -1)], axis=1).tofile(path)


def load_cifar_dir(path, split: str = "train") -> Dataset:
    p = Path(path)
    files = sorted(p.glob("data_batch_*.bin")) if split == "train" else [p / "test_batch.bin"]
    files = [f for f in files if f.exists()]
    if not files:
        raise ConfigError(f"{path}: no CIFAR-10 {split} batches found")
    parts = [read_cifar_binary(f) for f in files]
    return Dataset(np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts]))


# ---------------------------------------------------------------------------
# PNG directory and raw float directory


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def _read_labels(path: Path) -> tuple[list, np.ndarray]:
    names, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            names.append(row["filename"])
            labels.append(int(row["label"]))
    return names, np.asarray(labels, dtype=np.int64)


def _write_labels(path: Path, names, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "label"])
        for n, l in zip(names, labels):
            w.writerow([n, int(l)])


def read_png_dir(path) -> Dataset:
    from PIL import Image

    p = Path(path)
    names, labels = _read_labels(p / "labels.csv")
    imgs = []
    for n in names:
        a = np.asarray(Image.open(p / n), dtype=np.float64) / 255.0
        imgs.append(a[None] if a.ndim == 2 else a[..., :3].transpose(2, 0, 1))
    shapes = {a.shape for a in imgs}
    if len(shapes) != 1:
        raise ShapeError(f"{path}: images have differing extents {sorted(shapes)}")
    return Dataset(np.stack(imgs), labels, max(10, int(labels.max()) + 1), names)


def default_names(n: int) -> list:
    return [f"img_{i:06d}.png" for i in range(n)]


def write_png_dir(path, ds: Dataset) -> None:
    from PIL import Image

    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    names = ds.names or default_names(len(ds))
    u8 = to_uint8(ds.images)
    for n, a in zip(names, u8):
        img = Image.fromarray(a[0]) if a.shape[0] == 1 else Image.fromarray(a.transpose(1, 2, 0))
        img.save(p / n)
    _write_labels(p / "labels.csv", names, ds.labels)


def write_raw_set(path, ds: Dataset) -> None:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(ds.images, dtype="<f8").tofile(p / "images.f64")
    (p / "images.json").write_text(json.dumps({"shape": list(ds.images.shape), "dtype": "<f8",
                                               "num_classes": ds.num_classes}))
    if not (p / "labels.csv").exists():
        _write_labels(p / "labels.csv", ds.names or default_names(len(ds)), ds.labels)


def read_raw_set(path) -> Dataset:
    p = Path(path)
    meta = json.loads((p / "images.json").read_text())
    images = np.fromfile(p / "images.f64", dtype="<f8").reshape(meta["shape"]).astype(np.float64)
    names, labels = _read_labels(p / "labels.csv")
    return Dataset(images, labels, meta.get("num_classes", 10), names)


def resolve_path(spec: str) -> Path:
    p = Path(spec)
    root = os.environ.get(DATA_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p


def load_dataset(spec: str, split: str = "train") -> Dataset:
    """Load any supported source (see module docstring)."""
    if spec.startswith("synthetic"):
        return parse_synthetic(spec)
    p = resolve_path(spec)
    if not p.exists():
        raise ConfigError(f"dataset path {p} does not exist")
    if p.is_file():
        return Dataset(*read_cifar_binary(p))
    if (p / "images.f64").exists():
        return read_raw_set(p)
    if (p / "labels.csv").exists():
        return read_png_dir(p)
    return load_cifar_dir(p, split)


def train_val_split(ds: Dataset, val_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    k = max(1, int(math.floor(val_fraction * len(ds))))
    return ds.subset(np.sort(perm[k:])), ds.subset(np.sort(perm[:k]))
