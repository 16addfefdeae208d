"""Hand-rolled dense operations for the forward-only network reference.

conv2d/deconv2d accumulate contributions in (in-channel, ky, kx) order so
that each output element sees exactly the same float32 rounding sequence
as a naive six-deep loop nest; tests rely on that bit-equality.
"""

from __future__ import annotations

import numpy as np


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.astype(x.dtype) if isinstance(x, np.ndarray) else out


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x: (..., C_in), weight: (C_out, C_in), bias: (C_out,)."""
    return x @ weight.T + bias


def batchnorm_affine(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
                     channel_axis: int = -1) -> np.ndarray:
    """Inference-mode batch norm: a per-channel affine map."""
    shape = [1] * x.ndim
    shape[channel_axis] = -1
    return x * scale.reshape(shape) + shift.reshape(shape)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: int = 1, padding: int = 1) -> np.ndarray:
    """2D convolution. x: (C_in, H, W), weight: (C_out, C_in, KH, KW)."""
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ValueError(f"channel mismatch: input {c_in} vs weight {c_in_w}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1], x.shape[2]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((c_out, oh, ow), dtype=np.float32)
    for ic in range(c_in):
        for ky in range(kh):
            for kx in range(kw):
                patch = x[ic, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
                out += weight[:, ic, ky, kx][:, None, None] * patch[None, :, :]
    out += np.asarray(bias, dtype=np.float32)[:, None, None]
    return out


def deconv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
             stride: int = 1, padding: int = 0) -> np.ndarray:
    """Transposed 2D convolution. x: (C_in, H, W),
    weight: (C_in, C_out, KH, KW). Output size (H-1)*stride - 2*pad + K."""
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    c_in, h, w = x.shape
    c_in_w, c_out, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ValueError(f"channel mismatch: input {c_in} vs weight {c_in_w}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    full = np.zeros((c_out, oh + 2 * padding, ow + 2 * padding), dtype=np.float32)
    for ic in range(c_in):
        for ky in range(kh):
            for kx in range(kw):
                full[:, ky:ky + stride * h:stride, kx:kx + stride * w:stride] += \
                    weight[ic, :, ky, kx][:, None, None] * x[ic][None, :, :]
    if padding:
        full = full[:, padding:padding + oh, padding:padding + ow]
    out = full + np.asarray(bias, dtype=np.float32)[:, None, None]
    return out


def conv2d_loop_reference(x, weight, bias, stride=1, padding=1):
    """Naive loop-nest convolution used as a bit-exactness oracle."""
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    c_in, _, _ = x.shape
    c_out, _, kh, kw = weight.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1], x.shape[2]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((c_out, oh, ow), dtype=np.float32)
    for oc in range(c_out):
        for oy in range(oh):
            for ox in range(ow):
                acc = np.float32(0.0)
                for ic in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc = np.float32(
                                acc + np.float32(weight[oc, ic, ky, kx] *
                                                 x[ic, oy * stride + ky,
                                                   ox * stride + kx]))
                out[oc, oy, ox] = np.float32(acc + bias[oc])
    return out


def deconv2d_loop_reference(x, weight, bias, stride=1, padding=0):
    """Naive loop-nest transposed convolution oracle."""
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    c_in, h, w = x.shape
    _, c_out, kh, kw = weight.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    full = np.zeros((c_out, oh + 2 * padding, ow + 2 * padding), dtype=np.float32)
    for ic in range(c_in):
        for ky in range(kh):
            for kx in range(kw):
                for oc in range(c_out):
                    for i in range(h):
                        for j in range(w):
                            oy = i * stride + ky
                            ox = j * stride + kx
                            full[oc, oy, ox] = np.float32(
                                full[oc, oy, ox] +
                                np.float32(weight[ic, oc, ky, kx] * x[ic, i, j]))
    out = np.empty((c_out, oh, ow), dtype=np.float32)
    for oc in range(c_out):
        for oy in range(oh):
            for ox in range(ow):
                out[oc, oy, ox] = np.float32(
                    full[oc, oy + padding, ox + padding] + bias[oc])
    return out
