"""Gain/bias (atmospheric transfer) corruptions and the four benchmark sets.

An ATF maps intensities pixelwise as ``x -> gain * x + bias``. The sets are

* ``C``: constant gain ~ U(0.7, 1.3) and bias ~ U(-0.3, 0.3);
* ``L``: gain and bias vary linearly along one shared random direction,
  endpoints gain ~ U(0.5, 1.5), bias ~ U(-0.5, 0.5);
* ``B``: a blob centred on a random pixel whose effect decays as
  ``1 - rho**3`` out to radius ``0.8 * max(H, W)``;
* ``S``: as ``C`` plus a fixed shift of 1, saturated to [0, 1].

``severity`` scales every interval's half-width about its neutral point
(gain 1, bias 0, shift 0); severity 0 is the identity.

Random numbers come from Philox4x64-10 (``numpy.random.Philox``), keyed by
the 128-bit integer ``seed | (variant_code << 120) | (index << 64)`` with
``seed`` reduced mod 2**64 and ``index`` < 2**56. Uniform doubles are
``(u64 >> 11) * 2**-53``. Draw order per image is fixed and documented on
each generator, so the stream is reproducible outside this package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

VARIANTS = ("C", "L", "B", "S")
VARIANT_CODES = {"C": 1, "L": 2, "B": 3, "S": 4, "AUG": 5}
PRNG_NAME = "philox4x64-10"

CONST_GAIN, CONST_BIAS = 0.3, 0.3
FIELD_GAIN, FIELD_BIAS = 0.5, 0.5
SHIFT = 1.0
BLOB_RADIUS = 0.8

_MASK64 = (1 << 64) - 1
_MASK56 = (1 << 56) - 1


def stream(seed: int, index: int, variant: str) -> np.random.Generator:
    """The Philox stream for one image of one variant."""
    try:
        code = VARIANT_CODES[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}") from None
    if not 0 <= index <= _MASK56:
        raise ConfigError(f"image index {index} out of range")
    key = (int(seed) & _MASK64) | (code << 120) | (index << 64)
    return np.random.Generator(np.random.Philox(key=key))


def _sym(u: float, half: float, severity: float) -> float:
    return severity * half * (2.0 * u - 1.0)


@dataclass
class AtfField:
    """Per-pixel gain and bias for one image plus the scalars that made them."""

    gain: np.ndarray
    bias: np.ndarray
    params: dict
    seed: int = 0
    variant: str = "C"
    index: int = 0
    clamp: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.gain.shape


def atf_apply(image: np.ndarray, fld: AtfField) -> np.ndarray:
    """``gain * x + bias`` broadcast over channels; (C, H, W) or (H, W).

    Only fields flagged ``clamp`` (the shifted set) saturate to [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-2:] != fld.gain.shape or fld.bias.shape != fld.gain.shape:
        raise ShapeError(f"field {fld.gain.shape} does not match image {img.shape}")
    out = img * fld.gain + fld.bias
    if fld.clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def constant_field(alpha: float, beta: float, h: int, w: int, **meta) -> AtfField:
    return AtfField(np.full((h, w), alpha), np.full((h, w), beta),
                    {"alpha": alpha, "beta": beta}, **meta)


def gen_constant_field(seed: int, index: int, h: int, w: int, severity: float = 1.0) -> AtfField:
    """Set C. Draws: alpha, beta."""
    g = stream(seed, index, "C")
    alpha = 1.0 + _sym(g.random(), CONST_GAIN, severity)
    beta = _sym(g.random(), CONST_BIAS, severity)
    return constant_field(alpha, beta, h, w, seed=seed, variant="C", index=index)


def linear_ramp(h: int, w: int, theta: float) -> np.ndarray:
    """Pixel coordinates projected on direction ``theta`` (x right, y down),
    mapped affinely to [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    lo, hi = proj.min(), proj.max()
    if hi - lo <= 0:
        return np.zeros((h, w))
    return (proj - lo) / (hi - lo)


def linear_field_from(params: dict, h: int, w: int, **meta) -> AtfField:
    t = linear_ramp(h, w, params["theta"])
    a0, a1, b0, b1 = params["alpha0"], params["alpha1"], params["beta0"], params["beta1"]
    return AtfField(a0 + (a1 - a0) * t, b0 + (b1 - b0) * t, dict(params), **meta)


def gen_linear_field(seed: int, index: int, h: int, w: int, severity: float = 1.0) -> AtfField:
    """Set L. Draws: alpha0, alpha1, beta0, beta1, theta = 2*pi*u."""
    g = stream(seed, index, "L")
    p = {
        "alpha0": 1.0 + _sym(g.random(), FIELD_GAIN, severity),
        "alpha1": 1.0 + _sym(g.random(), FIELD_GAIN, severity),
        "beta0": _sym(g.random(), FIELD_BIAS, severity),
        "beta1": _sym(g.random(), FIELD_BIAS, severity),
        "theta": 2.0 * math.pi * g.random(),
    }
    return linear_field_from(p, h, w, seed=seed, variant="L", index=index)


def blob_weight(h: int, w: int, cy: int, cx: int) -> np.ndarray:
    """``clip(1 - rho**3, 0, 1)`` with rho = distance / (0.8 * max(h, w))."""
    radius = BLOB_RADIUS * max(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rho = np.hypot(yy - cy, xx - cx) / radius
    return np.clip(1.0 - rho ** 3, 0.0, 1.0)


def blob_field_from(params: dict, h: int, w: int, **meta) -> AtfField:
    wt = blob_weight(h, w, params["cy"], params["cx"])
    return AtfField(1.0 + (params["alpha"] - 1.0) * wt, params["beta"] * wt, dict(params), **meta)


def gen_blob_field(seed: int, index: int, h: int, w: int, severity: float = 1.0) -> AtfField:
    """Set B. Draws: cy = floor(u*h), cx = floor(u*w), alpha, beta."""
    g = stream(seed, index, "B")
    p = {
        "cy": min(int(g.random() * h), h - 1),
        "cx": min(int(g.random() * w), w - 1),
        "alpha": 1.0 + _sym(g.random(), FIELD_GAIN, severity),
        "beta": _sym(g.random(), FIELD_BIAS, severity),
    }
    return blob_field_from(p, h, w, seed=seed, variant="B", index=index)


def gen_shift_corruption(seed: int, index: int, severity: float = 1.0) -> tuple[float, float, float]:
    """Set S scalars. Draws: alpha, beta; gamma = severity * 1."""
    g = stream(seed, index, "S")
    alpha = 1.0 + _sym(g.random(), CONST_GAIN, severity)
    beta = _sym(g.random(), CONST_BIAS, severity)
    return alpha, beta, SHIFT * severity


def shift_field(alpha: float, beta: float, gamma: float, h: int, w: int, **meta) -> AtfField:
    return AtfField(np.full((h, w), alpha), np.full((h, w), beta + gamma),
                    {"alpha": alpha, "beta": beta, "gamma": gamma}, clamp=True, **meta)


def gen_field(variant: str, seed: int, index: int, h: int, w: int, severity: float = 1.0) -> AtfField:
    if variant == "C":
        return gen_constant_field(seed, index, h, w, severity)
    if variant == "L":
        return gen_linear_field(seed, index, h, w, severity)
    if variant == "B":
        return gen_blob_field(seed, index, h, w, severity)
    if variant == "S":
        a, b, c = gen_shift_corruption(seed, index, severity)
        return shift_field(a, b, c, h, w, seed=seed, variant="S", index=index)
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def field_from_record(variant: str, params: dict, h: int, w: int, seed: int = 0,
                      index: int = 0) -> AtfField:
    meta = dict(seed=seed, variant=variant, index=index)
    if variant == "C":
        return constant_field(params["alpha"], params["beta"], h, w, **meta)
    if variant == "L":
        return linear_field_from(params, h, w, **meta)
    if variant == "B":
        return blob_field_from(params, h, w, **meta)
    if variant == "S":
        return shift_field(params["alpha"], params["beta"], params["gamma"], h, w, **meta)
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class CorruptionManifest:
    """Everything needed to rebuild a corrupted set from the clean one."""

    variant: str
    seed: int
    severity: float
    records: list = field(default_factory=list)
    prng: str = PRNG_NAME

    def to_json(self) -> str:
        return json.dumps({"variant": self.variant, "seed": self.seed, "severity": self.severity,
                           "prng": self.prng, "records": self.records}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CorruptionManifest":
        d = json.loads(text)
        return cls(d["variant"], int(d["seed"]), float(d["severity"]), d["records"],
                   d.get("prng", PRNG_NAME))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CorruptionManifest":
        return cls.from_json(Path(path).read_text())

    def ranges(self) -> dict:
        """Sampling intervals implied by variant and severity."""
        s = self.severity
        if self.variant in ("C", "S"):
            r = {"alpha": (1 - CONST_GAIN * s, 1 + CONST_GAIN * s), "beta": (-CONST_BIAS * s, CONST_BIAS * s)}
            if self.variant == "S":
                r["gamma"] = (SHIFT * s, SHIFT * s)
            return r
        return {"alpha": (1 - FIELD_GAIN * s, 1 + FIELD_GAIN * s), "beta": (-FIELD_BIAS * s, FIELD_BIAS * s)}


def _check_images(images) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4:
        raise ShapeError(f"images must be (N, C, H, W), got {imgs.shape}")
    return imgs


def corrupt_dataset(images, labels, variant: str, seed: int, severity_scale: float = 1.0,
                    ) -> tuple[np.ndarray, np.ndarray, CorruptionManifest]:
    """Corrupt every image with its own field; labels and order are kept."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    imgs = _check_images(images)
    n, _, h, w = imgs.shape
    out = np.empty_like(imgs)
    manifest = CorruptionManifest(variant, int(seed), float(severity_scale))
    for i in range(n):
        f = gen_field(variant, seed, i, h, w, severity_scale)
        out[i] = atf_apply(imgs[i], f)
        manifest.records.append(dict(f.params))
    return out, np.array(labels, copy=True), manifest


def replay_manifest(images, labels, manifest: CorruptionManifest,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild a corrupted set from recorded scalars (no random draws)."""
    imgs = _check_images(images)
    if len(manifest.records) != imgs.shape[0]:
        raise ShapeError(f"manifest has {len(manifest.records)} records for {imgs.shape[0]} images")
    _, _, h, w = imgs.shape
    out = np.empty_like(imgs)
    for i, rec in enumerate(manifest.records):
        f = field_from_record(manifest.variant, rec, h, w, manifest.seed, i)
        out[i] = atf_apply(imgs[i], f)
    return out, np.array(labels, copy=True)


def gain_bias_augment(images: np.ndarray, fraction: float, rng: np.random.Generator,
                      ) -> np.ndarray:
    """Constant gain ~ U(1-f, 1+f) and bias ~ U(-f, f) per image."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"augmentation fraction must be in [0, 1], got {fraction}")
    n = images.shape[0]
    alpha = 1.0 + fraction * (2.0 * rng.random(n) - 1.0)
    beta = fraction * (2.0 * rng.random(n) - 1.0)
    return images * alpha[:, None, None, None] + beta[:, None, None, None]


def corrupt_one(image: np.ndarray, variant: str, seed: int, index: int,
                severity: float = 1.0) -> np.ndarray:
    return atf_apply(image, gen_field(variant, seed, index, image.shape[-2], image.shape[-1], severity))


def severity_sweep(images, variant: str, seed: int, levels) -> dict:
    """Corrupted copies of ``images`` at each severity in ``levels``."""
    return {float(s): corrupt_dataset(images, np.zeros(len(images)), variant, seed, s)[0]
            for s in levels}
