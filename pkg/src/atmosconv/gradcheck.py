"""Central finite differences, used as an independent check of the tape."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor, no_grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.item()
    v = float(v)
    if not math.isfinite(v):
        raise NumericError(f"objective returned non-finite value {v}")
    return v


def finite_diff_grad(f: Callable[[], object], params, h: float = 1e-5,
                     indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Estimate df/dp by (f(p + h e_i) - f(p - h e_i)) / 2h.

    ``params`` (a Tensor or ndarray) is perturbed in place and restored after
    each evaluation, so ``f`` should read it by reference. When ``indices``
    (flat positions) is given only those entries are estimated; the rest of
    the returned array is zero.
    """
    if not h > 0:
        raise ConfigError(f"step h must be positive, got {h}")
    arr = params.data if isinstance(params, Tensor) else params
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ConfigError("params must be contiguous so it can be perturbed in place")
    out = np.zeros(arr.size)
    idx = range(arr.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(arr.shape)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps round-off in near-zero gradients from reading as a large
    relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def smooth_probes(f: Callable[[], object], params, n: int, h: float = 1e-5,
                  rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Central differences at up to ``n`` random entries of ``params`` whose
    +-h perturbations leave every relu/abs/pooling branch unchanged.

    A probe that straddles a kink measures an average of two one-sided
    slopes rather than the derivative, so it is redrawn instead of compared.

    Returns (flat indices, estimates, number of probes rejected).
    """
    from .tensor import record_branches

    rng = rng or np.random.default_rng(0)
    arr = params.data if isinstance(params, Tensor) else params
    flat = arr.reshape(-1)
    with no_grad(), record_branches() as base:
        f()
    kept, est, rejected = [], [], 0
    with no_grad():
        for i in rng.permutation(arr.size):
            if len(kept) == n:
                break
            orig = flat[i]
            flat[i] = orig + h
            with record_branches() as bp:
                fp = _scalar(f())
            flat[i] = orig - h
            with record_branches() as bm:
                fm = _scalar(f())
            flat[i] = orig
            if _same_branches(base, bp) and _same_branches(base, bm):
                kept.append(int(i))
                est.append((fp - fm) / (2.0 * h))
            else:
                rejected += 1
    return np.asarray(kept, dtype=np.int64), np.asarray(est), rejected


@dataclass
class ProbeReport:
    name: str
    max_rel_error: float
    probes: int
    rejected: int
    max_abs_grad: float = float("nan")    # largest |analytic| among the probes
    max_abs_error: float = float("nan")


def check_model_gradients(model, x: np.ndarray, y: np.ndarray, probes: int = 20,
                          seed: int = 0, h: float = 1e-5, reg_strength: float = 0.0,
                          train: bool = True, jitter: float = 0.1,
                          floor: float = 1e-6) -> list[ProbeReport]:
    """Tape vs finite-difference gradients of the cross-entropy loss on
    ``probes`` random kink-free entries of every parameter tensor.

    Parameters that are identically zero (fresh biases and shifts) get
    N(0, ``jitter``) noise first: with a zero shift, a channel whose input is
    all zero sits exactly on a relu kink for every probe. Pass ``jitter=0``
    to skip. ``floor`` is the denominator floor of :func:`relative_error`;
    parameters whose true gradient vanishes (a conv scale in front of
    instance norm) only ever show round-off relative to it.
    """
    from .filters import soft_reg
    from .functional import softmax_cross_entropy
    from .tensor import backward

    def loss() -> Tensor:
        out = softmax_cross_entropy(model.forward(Tensor(x), train=train), y)
        if reg_strength:
            out = out + soft_reg(model.raw_kernels()) * reg_strength
        return out

    rng = np.random.default_rng(seed)
    if jitter:
        for p in model.parameters():
            if not p.data.any():
                p.data += rng.normal(0.0, jitter, size=p.shape)
    model.zero_grad()
    backward(loss())
    grads = {n: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
             for n, p in model.named_parameters().items()}
    model.zero_grad()
    out = []
    for name, p in model.named_parameters().items():
        idx, num, rej = smooth_probes(loss, p, probes, h, rng)
        if not idx.size:
            out.append(ProbeReport(name, float("nan"), 0, rej))
            continue
        ana = grads[name].reshape(-1)[idx]
        out.append(ProbeReport(name, float(relative_error(ana, num, floor).max()), int(idx.size), rej,
                               float(np.abs(ana).max()), float(np.abs(ana - num).max())))
    return out
