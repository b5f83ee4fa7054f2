"""Layer-level operations built from the primitives in :mod:`relmimic.tensor`."""

from __future__ import annotations

from functools import lru_cache
from typing import Callable

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    exp,
    gather,
    lrelu,
    matmul,
    mean,
    pad,
    relu,
    reshape,
    select,
    sqrt,
    transpose,
    tsum,
    unfold,
)

__all__ = [
    "conv2d",
    "conv_output_size",
    "max_pool3d",
    "softmax_rows",
    "layer_norm",
    "dense",
    "relu",
    "lrelu",
    "matmul",
    "grad_check",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, kernel: int, stride: int, pad_: int) -> int:
    return (size + 2 * pad_ - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCHW input with an ``(F, C, kh, kw)`` weight.

    Zero padding.  Output extent per axis is ``(H + 2p - k) // s + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be (F, C, kh, kw), got shape {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if c != cw:
        raise ValueError(f"conv2d channel axis mismatch: input has {c}, weight expects {cw}")
    if h + 2 * ph < kh:
        raise ValueError(f"conv2d height axis too small: {h} + 2*{ph} < kernel {kh}")
    if w + 2 * pw < kw:
        raise ValueError(f"conv2d width axis too small: {w} + 2*{pw} < kernel {kw}")
    xp = pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = unfold(xp, kh, kw, sh, sw)                      # N, H', W', C*kh*kw
    _, ho, wo, kdim = cols.shape
    out = matmul(reshape(cols, (n * ho * wo, kdim)), transpose(reshape(weight, (f, kdim))))
    out = transpose(reshape(out, (n, ho, wo, f)), (0, 3, 1, 2))
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, f, 1, 1))
    return out


@lru_cache(maxsize=64)
def _pool_indices(shape, kernel, stride, padding) -> np.ndarray:
    """Flat argmax-candidate index windows for max pooling over (C, H, W)."""
    n, c, h, w = shape
    out = []
    for axis, (size, k, s, p) in enumerate(zip((c, h, w), kernel, stride, padding)):
        if size + 2 * p < k:
            name = ("channel", "height", "width")[axis]
            raise ValueError(f"max_pool3d {name} axis too small: {size} + 2*{p} < kernel {k}")
        if p >= k:
            name = ("channel", "height", "width")[axis]
            raise ValueError(f"max_pool3d {name} padding {p} must be smaller than kernel {k}")
        out.append(conv_output_size(size, k, s, p))
    ids = np.arange(n * c * h * w).reshape(shape)
    pc, ph, pw = padding
    ids = np.pad(ids, ((0, 0), (pc, pc), (ph, ph), (pw, pw)), constant_values=-1)
    win = np.lib.stride_tricks.sliding_window_view(ids, kernel, axis=(1, 2, 3))
    sc, sh, sw = stride
    win = win[:, ::sc, ::sh, ::sw][:, :out[0], :out[1], :out[2]]
    win = np.ascontiguousarray(win.reshape(n, out[0], out[1], out[2], -1))
    win.setflags(write=False)
    return win


def max_pool3d(x, kernel, stride, padding) -> Tensor:
    """Max pooling of an NCHW tensor over the (channel, height, width) axes.

    Padding never wins a window.  A kernel of ``(3, 1, 1)`` pools features
    only, leaving the spatial grid untouched.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"max_pool3d input must be NCHW, got shape {x.shape}")
    kernel, stride, padding = tuple(kernel), tuple(stride), tuple(padding)
    win = _pool_indices(x.shape, kernel, stride, padding)
    flat = np.append(x.data.reshape(-1), -np.inf)
    vals = flat[win]                 # index -1 picks the -inf sentinel
    best = select(np.take_along_axis(win, vals.argmax(axis=-1)[..., None], axis=-1)[..., 0])
    return gather(x, best)


def softmax_rows(m) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    m = as_tensor(m)
    shift = Tensor(m.data.max(axis=-1, keepdims=True))
    e = exp(m - shift)
    return e / tsum(e, axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``gain*x + bias``."""
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


def dense(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"dense feature axis mismatch: input has {x.shape[-1]}, weight expects {weight.shape[1]}"
        )
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5,
               analytic: np.ndarray | None = None) -> float:
    """Max relative error between the autodiff gradient and central differences.

    Error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    from .tensor import grad

    x = np.array(x, dtype=np.float64)
    if analytic is None:
        xt = Tensor(x, requires_grad=True)
        analytic = grad(f(xt), [xt])[0].data
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x)).item()
        flat[i] = orig - step
        lo = f(Tensor(x)).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
