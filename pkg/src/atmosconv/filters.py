"""Algebra of a filter's positive and negative parts.

A kernel ``w`` splits as ``w = w_plus - w_minus`` with both parts
nonnegative. The positive weight ratio

    r(w) = (|w_plus| - |w_minus|) / (|w_plus| + |w_minus|)     (L1 norms)

places a filter between differencing (r = 0) and averaging (r = +-1), and
any kernel is a nonnegative combination of one differencing and one
averaging filter. Normalizing each part to unit L1 mass forces the
dichotomy exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateError, NumericError
from .tensor import Tensor

DEFAULT_EPS = 1e-6


@dataclass
class FilterKernel:
    """A weight block treated as one flat vector for the algebra.

    Derived quantities are properties, so they always reflect the current
    ``weights``.
    """

    weights: Tensor
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not isinstance(self.weights, Tensor):
            self.weights = Tensor(self.weights)
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @property
    def array(self) -> np.ndarray:
        return self.weights.data

    @property
    def pos_sum(self) -> float:
        a = self.array
        return float(a[a > 0].sum())

    @property
    def neg_sum(self) -> float:
        a = self.array
        return float(-a[a < 0].sum())

    @property
    def l1(self) -> float:
        return self.pos_sum + self.neg_sum

    @property
    def is_degenerate(self) -> bool:
        """True for the all-zero kernel, whose ratio is defined as 0."""
        return self.l1 == 0.0

    @property
    def ratio(self) -> float:
        return positive_weight_ratio(self)


def as_kernel(w, eps: float = DEFAULT_EPS) -> FilterKernel:
    return w if isinstance(w, FilterKernel) else FilterKernel(as_tensor_checked(w), eps)


def as_tensor_checked(w) -> Tensor:
    t = w if isinstance(w, Tensor) else Tensor(w)
    if np.isnan(t.data).any():
        raise NumericError("kernel contains NaN")
    return t


def split_parts(w) -> tuple[Tensor, Tensor]:
    """Positive part ``w * 1(w > 0)`` and negative part ``-w * 1(w < 0)``."""
    k = as_kernel(w)
    a = k.array
    if np.isnan(a).any():
        raise NumericError("kernel contains NaN")
    return Tensor(np.where(a > 0, a, 0.0)), Tensor(np.where(a < 0, -a, 0.0))


def positive_weight_ratio(w) -> float:
    k = as_kernel(w)
    p, n = k.pos_sum, k.neg_sum
    if p + n == 0.0:
        return 0.0
    return (p - n) / (p + n)


def weight_sum_identity(w) -> tuple[float, float]:
    """Both sides of ``sum(w) == ||w||_1 * r(w)``."""
    k = as_kernel(w)
    return float(k.array.sum()), k.l1 * positive_weight_ratio(k)


def filter_ratios(weights: np.ndarray) -> np.ndarray:
    """r(w) for each output-channel block of an (O, ...) weight array."""
    w = np.asarray(weights, dtype=np.float64).reshape(weights.shape[0], -1)
    p = np.where(w > 0, w, 0.0).sum(axis=1)
    n = np.where(w < 0, -w, 0.0).sum(axis=1)
    tot = p + n
    return np.divide(p - n, tot, out=np.zeros_like(tot), where=tot > 0)


@dataclass
class Decomposition:
    """``sign * w == diff_coeff * diff_filter + avg_coeff * avg_filter``.

    ``diff_filter`` is None for single-signed kernels, which are pure
    averaging (``diff_coeff == 0``).
    """

    diff_coeff: float
    diff_filter: Optional[FilterKernel]
    avg_coeff: float
    avg_filter: FilterKernel
    sign_flip: bool = False

    def reconstruct(self) -> np.ndarray:
        """The kernel as originally given (sign flip undone)."""
        out = self.avg_coeff * self.avg_filter.array
        if self.diff_filter is not None:
            out = self.diff_coeff * self.diff_filter.array + out
        return -out if self.sign_flip else out


def decompose(w) -> Decomposition:
    k = as_kernel(w)
    a = k.array
    if k.is_degenerate:
        raise DegenerateError("the all-zero kernel has no averaging/differencing decomposition")
    flip = k.pos_sum < k.neg_sum
    if flip:
        a = -a
    plus = np.where(a > 0, a, 0.0)
    minus = np.where(a < 0, -a, 0.0)
    p, n = plus.sum(), minus.sum()
    avg = FilterKernel(Tensor(plus / p), k.eps)
    if n == 0.0:
        return Decomposition(0.0, None, float(p), avg, flip)
    diff = FilterKernel(Tensor(plus / p - minus / n), k.eps)
    return Decomposition(float(n), diff, float(p - n), avg, flip)


def normalize_parts(w: Tensor, axes, eps: float = DEFAULT_EPS) -> Tensor:
    """``w_plus / (|w_plus| + eps) - w_minus / (|w_minus| + eps)`` with the L1
    sums taken over ``axes``; built from tape primitives so it is
    differentiable in ``w``."""
    plus, minus = T.split_pos_neg(w)
    pn = T.add(T.tsum(plus, axis=axes, keepdims=True), eps)
    nn = T.add(T.tsum(minus, axis=axes, keepdims=True), eps)
    return T.sub(T.div(plus, pn), T.div(minus, nn))


def normalize_filter(w, eps: Optional[float] = None) -> FilterKernel:
    """Normalize the whole kernel as one flat vector."""
    k = as_kernel(w)
    eps = k.eps if eps is None else eps
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    t = k.weights
    return FilterKernel(normalize_parts(t, tuple(range(t.ndim)) or None, eps), eps)


def normalize_filter_bank(weights: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Normalize each output-channel block of an (O, C, kH, kW) weight."""
    return normalize_parts(weights, tuple(range(1, weights.ndim)), eps)


def soft_reg(kernels: Sequence) -> Tensor:
    """Sum over kernels of ``|1 - |w_plus|| + |1 - |w_minus||``.

    Each entry is either a FilterKernel (one flat kernel) or an (O, ...)
    weight Tensor, in which case every output-channel block counts as one
    kernel. Multiply by the regularization strength at the call site.
    """
    kernels = list(kernels)
    if not kernels:
        raise ConfigError("soft_reg needs at least one kernel")
    total = None
    for k in kernels:
        if isinstance(k, FilterKernel):
            t, axes = k.weights, None
        else:
            t = k if isinstance(k, Tensor) else Tensor(k)
            axes = tuple(range(1, t.ndim)) if t.ndim > 1 else None
        plus, minus = T.split_pos_neg(t)
        term = T.add(T.tabs(T.sub(1.0, T.tsum(plus, axis=axes))),
                     T.tabs(T.sub(1.0, T.tsum(minus, axis=axes))))
        term = T.tsum(term)
        total = term if total is None else T.add(total, term)
    return total


def mean_part_deviation(weight_blocks: Iterable[np.ndarray]) -> float:
    """Mean over all output-channel filters of ``|1-|w+|| + |1-|w-||``."""
    vals = []
    for w in weight_blocks:
        w = np.asarray(w).reshape(np.shape(w)[0], -1)
        p = np.where(w > 0, w, 0.0).sum(axis=1)
        n = np.where(w < 0, -w, 0.0).sum(axis=1)
        vals.append(np.abs(1 - p) + np.abs(1 - n))
    return float(np.concatenate(vals).mean())
