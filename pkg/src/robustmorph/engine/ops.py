"""Differentiable layer operations.

All image ops take batched channel-first input ``(N, C, H, W)``; a single
``(C, H, W)`` image is accepted and returned without the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, apply_op, needs_grad


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W), got dims {x.dims}")
    return x.data, False


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    # (N, Ho, Wo, C, kh, kw) -> rows of patches
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip)."""
    xb, single = _batched(x)
    w = kernels.data
    if w.ndim != 4:
        raise ShapeError(f"kernels must be O x C x Kh x Kw, got {w.shape}")
    o, c, kh, kw = w.shape
    n, cin, h, wd = xb.shape
    if cin != c:
        raise ShapeError(f"input has {cin} channels but kernels expect {c}")
    if bias.data.shape != (o,):
        raise ShapeError(f"bias must have {o} entries, got {bias.data.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.reshape(o, -1)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    want_gx = needs_grad(x)

    def backward_fn(gout: np.ndarray):
        g = gout[None] if single else gout
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0)
        if not want_gx:
            return None, gw, gb
        if stride == 1 and padding <= min(kh, kw) - 1:
            # input gradient = correlation of the padded output gradient with the
            # spatially flipped, channel-transposed kernels
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            gcols = _im2col(gp, kh, kw, 1, h, wd)
            wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        else:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gx = np.ascontiguousarray(gx)
        return (gx[0] if single else gx), gw, gb

    return apply_op("conv2d", (x, kernels, bias), out[0] if single else out, backward_fn,
                    stride=stride, padding=padding)


def maxpool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    stride = kernel if stride is None else stride
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"pool kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if kernel == stride:
        # running max over the k*k window offsets; strict ">" keeps the first maximum
        out = xb[:, :, 0:ho * kernel:kernel, 0:wo * kernel:kernel].copy()
        arg = np.zeros(out.shape, dtype=np.int8 if kernel * kernel < 128 else np.int32)
        for idx in range(1, kernel * kernel):
            i, j = divmod(idx, kernel)
            cand = xb[:, :, i:i + ho * kernel:kernel, j:j + wo * kernel:kernel]
            better = cand > out
            out = np.where(better, cand, out)
            arg[better] = idx

        def backward_fn(gout: np.ndarray):
            g = gout[None] if single else gout
            gx = np.zeros_like(xb)
            for idx in range(kernel * kernel):
                i, j = divmod(idx, kernel)
                gx[:, :, i:i + ho * kernel:kernel, j:j + wo * kernel:kernel] = np.where(arg == idx, g, 0)
            return (gx[0] if single else gx),
    else:
        win = sliding_window_view(xb, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        win = win.reshape(n, c, ho, wo, kernel * kernel)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def backward_fn(gout: np.ndarray):
            g = gout[None] if single else gout
            gwin = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
            np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
            gwin = gwin.reshape(n, c, ho, wo, kernel, kernel)
            gx = np.zeros_like(xb)
            for i in range(kernel):
                for j in range(kernel):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gwin[..., i, j]
            return (gx[0] if single else gx),

    return apply_op("maxpool2d", (x,), out[0] if single else np.ascontiguousarray(out), backward_fn,
                    kernel=kernel, stride=stride)


@dataclass
class RunningStats:
    """Batch-norm running mean/variance (not trainable)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


BN_EPS = 1e-5


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                training: bool, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place with an
    exponential moving average (unbiased variance, as is customary).
    """
    xb = x.data
    if xb.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (N, C, H, W), got {x.dims}")
    n, c, h, w = xb.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"gamma/beta must have {c} entries")
    g = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("training-mode batchnorm needs at least 2 values per channel")
        mean = xb.mean(axis=(0, 2, 3))
        xc = xb - mean.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(1, c, 1, 1)
        mom = running.momentum
        running.mean[...] = (1 - mom) * running.mean + mom * mean
        running.var[...] = (1 - mom) * running.var + mom * var * (m / (m - 1))

        def backward_fn(gout: np.ndarray):
            gbeta = gout.sum(axis=(0, 2, 3))
            ggamma = (gout * xhat).sum(axis=(0, 2, 3))
            gxhat = gout * g
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            )
            return gx.astype(xb.dtype, copy=False), ggamma, gbeta
    else:
        inv = (1.0 / np.sqrt(running.var + eps)).astype(xb.dtype)
        xhat = (xb - running.mean.reshape(1, c, 1, 1).astype(xb.dtype)) * inv.reshape(1, c, 1, 1)

        def backward_fn(gout: np.ndarray):
            gbeta = gout.sum(axis=(0, 2, 3))
            ggamma = (gout * xhat).sum(axis=(0, 2, 3))
            return gout * g * inv.reshape(1, c, 1, 1), ggamma, gbeta

    out = xhat * g + beta.data.reshape(1, c, 1, 1)
    return apply_op("batchnorm2d", (x, gamma, beta), out.astype(xb.dtype, copy=False), backward_fn,
                    training=training, eps=eps)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` with ``W`` of shape (D, K)."""
    xd, w = x.data, weights.data
    if w.ndim != 2 or xd.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input length {xd.shape[-1]} does not match weights {w.shape}")
    if bias.data.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias must have {w.shape[1]} entries")
    out = xd @ w + bias.data

    def backward_fn(gout: np.ndarray):
        if xd.ndim == 1:
            gw = np.outer(xd, gout)
            gb = gout
        else:
            gw = xd.T @ gout
            gb = gout.sum(axis=0)
        return gout @ w.T, gw, gb

    return apply_op("dense", (x, weights, bias), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)
    return apply_op("relu", (x,), out, lambda g: (g * mask,))


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if logits.data.shape[-1] < 1:
        raise ShapeError("softmax needs at least one logit")
    s = softmax_array(logits.data)

    def backward_fn(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return apply_op("softmax", (logits,), s, backward_fn)


def reshape(x: Tensor, dims: tuple[int, ...]) -> Tensor:
    src = x.data.shape
    out = x.data.reshape(dims)
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(src),), dims=out.shape)


def flatten(x: Tensor) -> Tensor:
    """Flatten all but the batch axis (row-major, so C, H, W order is kept)."""
    return reshape(x, (x.data.shape[0], -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: dims {a.dims} and {b.dims} differ")
    return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def global_avg_pool(x: Tensor) -> Tensor:
    xb = x.data
    if xb.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.dims}")
    n, c, h, w = xb.shape
    out = xb.mean(axis=(2, 3))

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), xb.shape).astype(xb.dtype),)

    return apply_op("global_avg_pool", (x,), out, backward_fn)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", tuple(tensors), out, backward_fn, axis=axis)


def split_rows(x: Tensor, start: int, stop: int) -> Tensor:
    src = x.data

    def backward_fn(g: np.ndarray):
        full = np.zeros_like(src)
        full[start:stop] = g
        return (full,)

    return apply_op("slice", (x,), src[start:stop], backward_fn, start=start, stop=stop)


def sum_all(x: Tensor) -> Tensor:
    src = x.data
    return apply_op("sum", (x,), np.asarray(src.sum()), lambda g: (np.full_like(src, g),))


def scale(x: Tensor, k: float) -> Tensor:
    return apply_op("scale", (x,), x.data * k, lambda g: (g * k,), k=k)
