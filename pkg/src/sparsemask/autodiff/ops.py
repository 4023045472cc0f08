"""Differentiable array operations used by the decoder, encoder and losses."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor


@dataclass
class ConvKernel:
    weight: Tensor  # (C_out, C_in, KH, KW)
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def is_pointwise(self) -> bool:
        _, _, kh, kw = self.weight.shape
        return kh == 1 and kw == 1 and self.stride == 1 and self.padding == 0


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batch norm eps must be positive")
        if not 0 < self.momentum <= 1:
            raise ValueError("batch norm momentum must be in (0, 1]")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an (N, C, H, W) tensor, got shape {x.shape}")


# -- convolution -----------------------------------------------------------
def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Cross-correlation via an explicit column buffer and one GEMM.

    Columns are laid out (C_in, KH, KW) so reductions run channel-major, then
    over the kernel window; this keeps results bit-stable for a fixed input.
    """
    x = as_tensor(x)
    _check_4d(x, "conv2d")
    w = kernel.weight
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d input shape {x.shape} does not match kernel shape {w.shape}")
    s, p = kernel.stride, kernel.padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {w.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    xpt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + s * ho:s, j:j + s * wo:s]
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = w.data.reshape(co, -1)
    out = (w2 @ cols2).reshape(co, n, ho, wo)
    if kernel.bias is not None:
        out += kernel.bias.data.reshape(co, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    bias = kernel.bias

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (gt @ cols2.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor.from_op(out, parents, backward)


# -- bilinear upsampling ---------------------------------------------------
@lru_cache(maxsize=256)
def interpolation_matrix(n_in: int, n_out: int, dtype_name: str = "float64") -> np.ndarray:
    """Rows map output positions to input samples.

    Output index ``o`` samples input coordinate ``o / n_out * n_in``; the floor
    sample gets weight ``1 - frac`` and the ceil sample (clamped to the last
    index) gets ``frac``.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        pos = o * n_in / n_out
        lo = int(np.floor(pos))
        hi = min(int(np.ceil(pos)), n_in - 1)
        frac = pos - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    m.setflags(write=False)
    return m.astype(dtype_name)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _check_4d(x, "bilinear_upsample")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample cannot downsample {(h, w)} to {(out_h, out_w)}")
    if (out_h, out_w) == (h, w):
        return x
    if h == 1 and w == 1:
        out = np.broadcast_to(x.data, (n, c, out_h, out_w)).copy()
        return Tensor.from_op(out, (x,), lambda g: (g.sum(axis=(2, 3), keepdims=True),))
    mh = interpolation_matrix(h, out_h, x.dtype.name)
    mw = interpolation_matrix(w, out_w, x.dtype.name)
    out = mh @ (x.data @ mw.T)

    def backward(g):
        return ((mh.T @ g) @ mw,)

    return Tensor.from_op(out, (x,), backward)


# -- normalization / pooling -----------------------------------------------
def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    x = as_tensor(x)
    _check_4d(x, "batch_norm")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"batch_norm input has {c} channels, state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    shape = (1, c, 1, 1)
    m = n * h * w

    if training:
        if m < 2:
            raise ShapeError(f"batch_norm in training mode needs more than one value per channel, got {x.shape}")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean *= 1 - mom
        state.running_mean += mom * mean
        state.running_var *= 1 - mom
        state.running_var += mom * var * (m / (m - 1))
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        centered = x.data - mean.reshape(shape)

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gscaled = g * gamma.data.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / m) * (
                m * gscaled
                - gscaled.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (gscaled * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
        else:
            gx = gscaled * inv_std.reshape(shape)
        return gx, gg, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


# -- channel concat / split ------------------------------------------------
def concat_channels(inputs: list[Tensor]) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels() of an empty list")
    for t in inputs:
        _check_4d(t, "concat_channels")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"concat_channels spatial/batch mismatch: {ref} vs {t.shape}")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs))]

    return Tensor.from_op(out, inputs, backward)


def split_channels(x: Tensor, sizes: list[int]) -> list[Tensor]:
    x = as_tensor(x)
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to channel count {x.shape[1]}")
    outs = []
    start = 0
    for size in sizes:
        sl = slice(start, start + size)

        def backward(g, sl=sl):
            full = np.zeros_like(x.data)
            full[:, sl] = g
            return (full,)

        outs.append(Tensor.from_op(x.data[:, sl].copy(), (x,), backward))
        start += size
    return outs


# -- classification loss ---------------------------------------------------
def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise cross-entropy of ``(N, K, H, W)`` logits against ``(N, H, W)`` ids."""
    logits = as_tensor(logits)
    _check_4d(logits, "softmax_cross_entropy")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= k):
        bad = labels[valid][(labels[valid] < 0) | (labels[valid] >= k)]
        raise ValueError(f"class id {int(bad[0])} out of range for {k} classes")
    safe = np.where(valid, labels, 0).astype(np.int64)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    if count == 0:
        return Tensor.from_op(np.asarray(0.0, dtype=logits.dtype), (logits,),
                              lambda g: (np.zeros_like(logits.data),))
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None] * (g / count)
        return (grad.astype(logits.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
