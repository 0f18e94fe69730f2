"""Differentiable neural-network primitives built on :class:`Tensor`.

Convolutions use the cross-correlation convention (no kernel flip) and
im2col lowering onto BLAS matrix products. ``conv_transpose2d`` is implemented
as the exact adjoint of ``conv2d`` with the same weight, stride and padding,
so weights have layout ``[C_in_of_conv, C_out_of_conv, k, k]`` seen from the
transposed side, i.e. ``[C_in, C_out, k, k]`` as for PyTorch.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, matmul

SOFTPLUS_THRESHOLD = 30.0


def elu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.data
    pos = v > 0
    neg = np.expm1(np.minimum(v, 0.0))
    out = np.where(pos, v, neg)

    def bw(g, needs):
        return (g * np.where(pos, 1.0, neg + 1.0),)

    return Tensor._from_op(out, (x,), bw, "elu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), returning x itself above the switchover at 30."""
    x = as_tensor(x)
    v = x.data
    big = v > SOFTPLUS_THRESHOLD
    safe = np.where(big, 0.0, v)
    out = np.where(big, v, np.log1p(np.exp(safe)))

    def bw(g, needs):
        sig = np.where(big, 1.0, 0.5 * (1.0 + np.tanh(0.5 * safe)))
        return (g * sig,)

    return Tensor._from_op(out, (x,), bw, "softplus")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``[in, out]``."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


# -- convolution -------------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ConfigError(
            f"conv extent: ({n} + 2*{padding} - {k}) / {stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded input [B, C, Hp, Wp] -> columns [B*ho*wo, C*k*k]."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-accumulate columns [B*ho*wo, C*k*k] back onto a padded canvas."""
    b, c = padded_shape[:2]
    cols = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(padded_shape)
    for i in range(k):
        hi = i + stride * (ho - 1) + 1
        for j in range(k):
            out[:, :, i:hi:stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else x[:, :, p:-p, p:-p]


def _check_conv_operands(x: Tensor, w: Tensor, channel_axis: int, name: str) -> None:
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"{name}: expected x [B,C,H,W] and square kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[channel_axis]:
        raise DimensionError(f"{name}: input channels {x.shape[1]} do not match kernel {w.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [B, C_in, H, W] with w [C_out, C_in, k, k]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_operands(x, w, 1, "conv2d")
    b, _, h, wd = x.shape
    c_out, k = w.shape[0], w.shape[2]
    ho = _out_extent(h, k, stride, padding)
    wo = _out_extent(wd, k, stride, padding)
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    wf = w.data.reshape(c_out, -1)
    out = (cols @ wf.T).reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)
    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents = (x, w, bias)
    padded_shape = xp.shape

    def bw(g, needs):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = gw = gb = None
        if needs[0]:
            gx = _unpad(_col2im(gf @ wf, padded_shape, k, stride, ho, wo), padding)
        if needs[1]:
            gw = (gf.T @ cols).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[: len(needs)]

    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`: x [B, C_in, H, W], w [C_in, C_out, k, k].

    Output extent is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_operands(x, w, 0, "conv_transpose2d")
    b, c_in, h, wd = x.shape
    c_out, k = w.shape[1], w.shape[2]
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv_transpose2d: non-positive output extent {ho}x{wo}")
    padded_shape = (b, c_out, ho + 2 * padding, wo + 2 * padding)
    wf = w.data.reshape(c_in, -1)
    xf = x.data.transpose(0, 2, 3, 1).reshape(-1, c_in)
    out = _unpad(_col2im(xf @ wf, padded_shape, k, stride, h, wd), padding)
    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents = (x, w, bias)

    def bw(g, needs):
        cols = _im2col(_pad(g, padding), k, stride, h, wd)
        gx = gw = gb = None
        if needs[0]:
            gx = (cols @ wf.T).reshape(b, h, wd, c_in).transpose(0, 3, 1, 2)
        if needs[1]:
            gw = (xf.T @ cols).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[: len(needs)]

    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "conv_transpose2d")


# -- normalization -----------------------------------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel-group) of x [B, C, H, W] to zero mean, unit variance."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"group_norm: expected [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.einsum("bgn,bgn->bg", xc, xc)[..., None] / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(b, c, h, w)
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data.reshape(1, c, 1, 1)
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data.reshape(1, c, 1, 1)
        parents.append(beta)
    has_gamma = gamma is not None

    def bw(g, needs):
        grads = []
        dxhat = g * gamma.data.reshape(1, c, 1, 1) if has_gamma else g
        if needs[0]:
            d = dxhat.reshape(b, groups, n)
            xh = xhat.reshape(b, groups, n)
            gx = inv * (d - d.mean(axis=2, keepdims=True) - xh * (d * xh).mean(axis=2, keepdims=True))
            grads.append(gx.reshape(b, c, h, w))
        else:
            grads.append(None)
        if has_gamma:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, tuple(parents), bw, "group_norm")
