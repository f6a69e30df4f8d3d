"""Convolutional network primitives built on the tape in :mod:`.tensor`.

Tensors are NCHW. Convolution is cross-correlation computed by gathering
sliding windows into a (C*kH*kW, N*H'*W') column matrix and doing one
matmul.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, _make, as_tensor, note_branch


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        w: kernel of shape (O, C, kH, kW).
        stride: positive step between windows.
        padding: zeros added on every spatial side.

    Returns:
        Tensor of shape (N, O, H', W').
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels but kernel expects {ci}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"gives empty output on a {h}x{wd} input")

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = _rows_to_nchw(wmat @ cols, n, ho, wo)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and kh == kw and padding <= kh - 1:
                # full correlation of g with the flipped, channel-swapped kernel
                wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gc = _im2col(g, kh, kw, 1, kh - 1 - padding, h, wd)
                gx = _rows_to_nchw(wt @ gc, n, h, wd)
            else:
                gx = _col2im(wmat.T @ g2, x.shape, kh, kw, stride, padding, ho, wo)
        return gx, gw

    return _make(out, "conv2d", (x, w), bwd)


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> (C*kh*kw, N*ho*wo) window matrix."""
    n, c = xd.shape[:2]
    if padding:
        xp = np.zeros(xd.shape[:2] + (xd.shape[2] + 2 * padding, xd.shape[3] + 2 * padding))
        xp[:, :, padding:-padding, padding:-padding] = xd
        xd = xp
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def _rows_to_nchw(m: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    """(O, N*ho*wo) -> (N, O, ho, wo)."""
    return np.ascontiguousarray(m.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3))


def _col2im(gcols: np.ndarray, xshape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    gcols = gcols.reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                gcols[:, i, j].transpose(1, 0, 2, 3)
    return gxp[:, :, padding:padding + h, padding:padding + w]


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Ties route the gradient to the first
    maximal element in row-major window order."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ConfigError(f"max_pool2d needs spatial extents >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    xd = x.data[:, :, :2 * h2, :2 * w2]
    blocks = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    note_branch(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :2 * h2, :2 * w2] = (
            gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))
        return (gx,)

    return _make(out, "max_pool2d", (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    area = h * w

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / area, (n, c, h, w)).copy(),)

    return _make(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), "softmax_cross_entropy", (logits,), bwd)


def standardize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...],
                eps: float = 1e-5, mean=None, var=None):
    """Affine standardization over ``axes`` of an NCHW tensor.

    With ``mean``/``var`` given (per channel) those statistics are used as
    constants; otherwise they are computed from ``x`` over ``axes`` and the
    gradient flows through them.

    Returns:
        (output tensor, batch mean, batch biased variance)
    """
    xd = x.data
    c = xd.shape[1]
    cshape = (1, c, 1, 1)
    fixed = mean is not None
    if fixed:
        mu = np.asarray(mean).reshape(cshape)
        v = np.asarray(var).reshape(cshape)
    else:
        mu = xd.mean(axis=axes, keepdims=True)
        v = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(cshape)
    out = xhat * gd + beta.data.reshape(cshape)
    m = int(np.prod([xd.shape[a] for a in axes]))
    param_axes = (0, 2, 3)

    def bwd(g):
        ggamma = (g * xhat).sum(axis=param_axes).reshape(gamma.shape)
        gbeta = g.sum(axis=param_axes).reshape(beta.shape)
        gxhat = g * gd
        if fixed:
            gx = gxhat * inv
        else:
            gx = (inv / m) * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    res = _make(out, "standardize", (x, gamma, beta), bwd)
    return res, mu, v
