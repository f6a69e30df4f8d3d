"""Classical Gaussian / DoG kernels and the illuminated-checkerboard demo."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .filters import FilterKernel
from .functional import conv2d
from .tensor import Tensor, no_grad

DARK, LIGHT = 0.25, 0.75


def _gauss_grid(sigma: float, size: int) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 3, got {size}")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    r = np.arange(size) - size // 2
    g1 = np.exp(-(r.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    g = np.outer(g1, g1)
    return g / g.sum()


def gaussian_kernel(sigma: float, size: int) -> FilterKernel:
    """Sampled 2-D Gaussian on integer offsets, normalized to unit sum."""
    return FilterKernel(Tensor(_gauss_grid(sigma, size)))


def dog_kernel(sigma_inner: float = 1.0, sigma_outer: float = 2.0, size: int = 9,
               normalized: bool = True) -> FilterKernel:
    """Difference of Gaussians.

    The normalized kernel has positive and negative parts of unit L1 mass
    (r = 0). The unnormalized one keeps the same shape but its positive part
    sums to 2 and its negative part to 1 (r = 1/3).
    """
    if not 0 < sigma_inner < sigma_outer:
        raise ConfigError(f"need 0 < sigma_inner < sigma_outer, got {sigma_inner}, {sigma_outer}")
    d = _gauss_grid(sigma_inner, size) - _gauss_grid(sigma_outer, size)
    plus = np.where(d > 0, d, 0.0)
    minus = np.where(d < 0, -d, 0.0)
    plus /= plus.sum()
    minus /= minus.sum()
    return FilterKernel(Tensor((1.0 if normalized else 2.0) * plus - minus))


@dataclass
class SceneSpec:
    """Checkerboard layout and illumination.

    ``illumination`` is ``"uniform"`` or ``"linear_ramp"``; a ramp multiplies
    intensities by a gain going linearly from ``lo`` to ``hi`` along
    ``angle_deg`` (0 = left to right).
    """

    tiles: int = 8
    tile_px: int = 16
    illumination: str = "uniform"
    lo: float = 1.0
    hi: float = 1.0
    angle_deg: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if self.tiles < 1 or self.tile_px < 1:
            raise ConfigError("tiles and tile_px must be positive")
        if self.illumination not in ("uniform", "linear_ramp"):
            raise ConfigError(f"unknown illumination {self.illumination!r}")
        if self.lo > self.hi:
            raise ConfigError(f"ramp needs lo <= hi, got {self.lo} > {self.hi}")

    @property
    def extent(self) -> int:
        return self.tiles * self.tile_px


def illumination_field(spec: SceneSpec) -> np.ndarray:
    n = spec.extent
    if spec.illumination == "uniform":
        return np.ones((n, n))
    th = math.radians(spec.angle_deg)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    proj = xx * math.cos(th) + yy * math.sin(th)
    span = proj.max() - proj.min()
    t = (proj - proj.min()) / span if span > 0 else np.zeros_like(proj)
    return spec.lo + (spec.hi - spec.lo) * t


def checkerboard_scene(spec: SceneSpec) -> np.ndarray:
    """(H, W) checkerboard with 0.25 / 0.75 tiles times the illumination gain,
    plus ``spec.offset``."""
    n = spec.extent
    idx = np.arange(n) // spec.tile_px
    board = np.where((idx[:, None] + idx[None, :]) % 2 == 0, DARK, LIGHT)
    return board * illumination_field(spec) + spec.offset


def filter_image(image: np.ndarray, kernel) -> np.ndarray:
    """Same-size correlation of a 2-D image with a 2-D kernel (zero padded)."""
    k = kernel.array if isinstance(kernel, FilterKernel) else np.asarray(kernel)
    pad = k.shape[0] // 2
    with no_grad():
        out = conv2d(Tensor(image[None, None]), Tensor(k[None, None]), padding=pad)
    return out.data[0, 0]


def region_masks(extent: int, tile_px: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Tile-interior and edge-band masks for an ``extent`` square image.

    Interiors keep pixels at least ceil(size/2) from every tile edge (image
    border included). The edge band keeps pixels within 2 px of an internal
    tile boundary, away from the image border by the same margin.
    """
    margin = math.ceil(size / 2)
    pos = np.arange(extent)
    in_tile = pos % tile_px
    interior_1d = (in_tile >= margin) & (in_tile < tile_px - margin)
    interior = interior_1d[:, None] & interior_1d[None, :]
    away = (pos >= margin) & (pos < extent - margin)
    near_1d = ((in_tile <= 1) | (in_tile >= tile_px - 2)) & away
    band = (near_1d[:, None] & away[None, :]) | (away[:, None] & near_1d[None, :])
    return interior, band & ~interior


@dataclass
class DemoStats:
    flat_bias: float
    edge_mag: float
    profile: np.ndarray

    @property
    def ratio(self) -> float:
        return self.flat_bias / self.edge_mag if self.edge_mag > 0 else math.inf


def demo_response_analysis(image: np.ndarray, kernel, tile_px: int) -> DemoStats:
    """Filter ``image`` and summarize the response.

    Returns the mean |response| over tile interiors, the mean |response| in
    the band around tile boundaries, and the center-row profile.
    """
    k = kernel.array if isinstance(kernel, FilterKernel) else np.asarray(kernel)
    size = k.shape[0]
    if size > tile_px:
        raise ConfigError(f"kernel size {size} exceeds tile size {tile_px}; regions would overlap")
    resp = filter_image(np.asarray(image, dtype=np.float64), k)
    interior, band = region_masks(image.shape[0], tile_px, size)
    a = np.abs(resp)
    flat = float(a[interior].mean()) if interior.any() else 0.0
    edge = float(a[band].mean()) if band.any() else 0.0
    return DemoStats(flat, edge, resp[resp.shape[0] // 2].copy())


def edge_columns(profile: np.ndarray, tile_px: int, search: int = 4) -> np.ndarray:
    """Column of the strongest |response| near each internal tile boundary."""
    profile = np.abs(np.asarray(profile, dtype=np.float64))
    cols = []
    for b in range(tile_px, profile.size, tile_px):
        lo, hi = max(0, b - search), min(profile.size, b + search)
        cols.append(lo + int(np.argmax(profile[lo:hi])))
    return np.asarray(cols)
