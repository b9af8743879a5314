"""Structured differentiable operations and small layer containers.

Convolution is im2col + GEMM so desk-scale training stays fast on one
CPU core. "reflect" padding repeats the edge pixel (symmetric
reflection); that choice keeps local averages mass-preserving at
borders, which the blur-based correspondence maps rely on.
"""
from __future__ import annotations

import numpy as np

from .array import DiffArray, ShapeError, SubstrateError, make_op
from .optim import Parameter

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "avg_pool",
    "batch_norm",
    "conv2d",
    "conv2d_input_grad",
    "softmax_channels",
    "upsample_conv",
    "upsample_nearest",
]

_PAD_MODES = ("zero", "reflect")
_VAR_FLOOR = 1e-5


def _as_diff(x) -> DiffArray:
    if isinstance(x, Parameter):
        return x.array
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=np.float32))


def _pad2d(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="symmetric")


def _unpad_grad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of _pad2d: fold halo gradients back onto the core."""
    if p == 0:
        return gp
    h = gp.shape[2] - 2 * p
    w = gp.shape[3] - 2 * p
    if mode == "zero":
        return gp[:, :, p : p + h, p : p + w].copy()
    # Symmetric padding is separable, so fold one axis at a time; this
    # routes the corner halo blocks through both reflections.
    g1 = gp[:, :, :, p : p + w].copy()
    g1[:, :, :, :p] += gp[:, :, :, p - 1 :: -1]
    g1[:, :, :, w - p :] += gp[:, :, :, p + w :][:, :, :, ::-1]
    g2 = g1[:, :, p : p + h, :].copy()
    g2[:, :, :p, :] += g1[:, :, p - 1 :: -1, :]
    g2[:, :, h - p :, :] += g1[:, :, p + h :, :][:, :, ::-1, :]
    return g2


def _conv_geometry(x_shape, w_shape, stride: int, mode: str):
    b, c, h, w = x_shape
    oc, ic, kh, kw = w_shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {w_shape}")
    if kh % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {kh}")
    if ic != c:
        raise ShapeError(
            f"kernel expects {ic} input channels but input has shape {x_shape}"
        )
    if stride < 1:
        raise SubstrateError(f"stride must be >= 1, got {stride}")
    if mode not in _PAD_MODES:
        raise SubstrateError(f"padding_mode must be one of {_PAD_MODES}, got '{mode}'")
    p = (kh - 1) // 2
    hout = (h + 2 * p - kh) // stride + 1
    wout = (w + 2 * p - kw) // stride + 1
    return p, hout, wout


def _im2col(xp: np.ndarray, k: int, stride: int, hout: int, wout: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, hout, wout), dtype=np.float32)
    for i in range(k):
        hi = i + (hout - 1) * stride + 1
        for j in range(k):
            wj = j + (wout - 1) * stride + 1
            cols[:, :, i, j] = xp[:, :, i:hi:stride, j:wj:stride]
    return cols.reshape(b, c * k * k, hout * wout)


def _col2im(cols: np.ndarray, xp_shape, k: int, stride: int, hout: int, wout: int) -> np.ndarray:
    b, c = xp_shape[:2]
    gxp = np.zeros(xp_shape, dtype=np.float32)
    cols = cols.reshape(b, c, k, k, hout, wout)
    for i in range(k):
        hi = i + (hout - 1) * stride + 1
        for j in range(k):
            wj = j + (wout - 1) * stride + 1
            gxp[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    return gxp


def _conv_forward_np(xv: np.ndarray, wv: np.ndarray, stride: int, mode: str):
    """Returns (y, cols, xp_shape); cols kept for the weight gradient."""
    p, hout, wout = _conv_geometry(xv.shape, wv.shape, stride, mode)
    k = wv.shape[2]
    xp = _pad2d(xv, p, mode)
    cols = _im2col(xp, k, stride, hout, wout)
    w2 = wv.reshape(wv.shape[0], -1)
    y = np.matmul(w2, cols).reshape(xv.shape[0], wv.shape[0], hout, wout)
    return y, cols, xp.shape


def _conv_grad_w_np(xv: np.ndarray, gout: np.ndarray, w_shape, stride: int, mode: str,
                    cols: np.ndarray | None = None) -> np.ndarray:
    p, hout, wout = _conv_geometry(xv.shape, w_shape, stride, mode)
    k = w_shape[2]
    if cols is None:
        xp = _pad2d(xv, p, mode)
        cols = _im2col(xp, k, stride, hout, wout)
    gm = gout.reshape(gout.shape[0], gout.shape[1], -1)
    gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape).astype(np.float32)


def _conv_grad_x_np(gout: np.ndarray, wv: np.ndarray, x_shape, stride: int, mode: str) -> np.ndarray:
    p, hout, wout = _conv_geometry(x_shape, wv.shape, stride, mode)
    k = wv.shape[2]
    b = x_shape[0]
    gm = gout.reshape(b, wv.shape[0], -1)
    w2 = wv.reshape(wv.shape[0], -1)
    gcols = np.matmul(w2.T, gm)
    xp_shape = (b, x_shape[1], x_shape[2] + 2 * p, x_shape[3] + 2 * p)
    gxp = _col2im(gcols, xp_shape, k, stride, hout, wout)
    return _unpad_grad(gxp, p, mode)


def conv2d(x, weight, bias=None, stride: int = 1, padding_mode: str = "zero") -> DiffArray:
    """Spatial cross-correlation with fixed padding (k-1)/2.

    weight has shape (out_ch, in_ch, k, k) with k odd; bias, if given,
    has shape (1, out_ch, 1, 1). Output spatial extents follow
    floor((H + 2p - k)/stride) + 1. Gradients flow to the input, the
    kernel and the bias.
    """
    x = _as_diff(x)
    w = _as_diff(weight)
    b = _as_diff(bias) if bias is not None else None
    y, cols, _ = _conv_forward_np(x.values, w.values, stride, padding_mode)
    if b is not None:
        if b.shape != (1, w.shape[0], 1, 1):
            raise ShapeError(
                f"bias shape {b.shape} does not match {w.shape[0]} output channels"
            )
        y = y + b.values

    def grad_fn(g):
        gw = _conv_grad_w_np(x.values, g, w.shape, stride, padding_mode, cols=cols)
        gx = _conv_grad_x_np(g, w.values, x.shape, stride, padding_mode)
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1).astype(np.float32)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_op(y, parents, grad_fn)


def conv2d_input_grad(gout, weight, input_hw: tuple[int, int], stride: int = 1,
                      padding_mode: str = "zero") -> DiffArray:
    """The input gradient of conv2d, exposed as a differentiable value.

    The result is linear in both operands, so its own backward rule
    needs only the conv forward (for gout) and the usual weight-grad
    contraction (for weight). This is what lets a gradient penalty on a
    conv stack backpropagate into the stack's kernels.
    """
    gout = _as_diff(gout)
    w = _as_diff(weight)
    b, oc = gout.shape[:2]
    if oc != w.shape[0]:
        raise ShapeError(
            f"gout channels {gout.shape} do not match kernel output channels {w.shape}"
        )
    x_shape = (b, w.shape[1], input_hw[0], input_hw[1])
    p, hout, wout = _conv_geometry(x_shape, w.shape, stride, padding_mode)
    if (hout, wout) != gout.shape[2:]:
        raise ShapeError(
            f"gout spatial extents {gout.shape[2:]} do not match conv output "
            f"{(hout, wout)} for input {input_hw}"
        )
    y = _conv_grad_x_np(gout.values, w.values, x_shape, stride, padding_mode)

    def grad_fn(u):
        g_gout, _, _ = _conv_forward_np(u, w.values, stride, padding_mode)
        g_w = _conv_grad_w_np(u, gout.values, w.shape, stride, padding_mode)
        return g_gout, g_w

    return make_op(y, (gout, w), grad_fn)


def upsample_nearest(x, factor: int) -> DiffArray:
    """Replicate each pixel into a factor x factor block."""
    x = _as_diff(x)
    if factor < 2:
        raise SubstrateError(f"upsample factor must be >= 2, got {factor}")
    out = x.values.repeat(factor, axis=2).repeat(factor, axis=3)

    def grad_fn(g):
        b, c, h, w = x.shape
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)).astype(np.float32),)

    return make_op(out, (x,), grad_fn)


def upsample_conv(x, weight, bias=None, factor: int = 2, padding_mode: str = "zero") -> DiffArray:
    """Nearest-neighbour upscale followed by a stride-1 conv.

    Upsampling before convolving keeps every output pixel covered by an
    identical kernel footprint, which avoids the checkerboard artifacts
    of transposed convolution.
    """
    return conv2d(upsample_nearest(x, factor), weight, bias, stride=1,
                  padding_mode=padding_mode)


def avg_pool(x, factor: int) -> DiffArray:
    """Non-overlapping box average; extents must divide by factor."""
    x = _as_diff(x)
    b, c, h, w = x.shape
    if factor < 1:
        raise SubstrateError(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    if h % factor or w % factor:
        raise ShapeError(f"extents {(h, w)} not divisible by pool factor {factor}")
    out = (
        x.values.reshape(b, c, h // factor, factor, w // factor, factor)
        .mean(axis=(3, 5), dtype=np.float32)
    )

    def grad_fn(g):
        g = g * np.float32(1.0 / (factor * factor))
        g = g.repeat(factor, axis=2).repeat(factor, axis=3)
        return (g.astype(np.float32),)

    return make_op(out, (x,), grad_fn)


def batch_norm(x, scale, shift, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1) -> DiffArray:
    """Per-channel normalization with a 1e-5 variance floor.

    train=True normalizes with batch statistics and updates the running
    buffers in place (new = (1-momentum)*old + momentum*batch).
    train=False uses the running buffers only, so one sample's output
    never depends on the rest of the batch.
    """
    x = _as_diff(x)
    scale = _as_diff(scale)
    shift = _as_diff(shift)
    c = x.shape[1]
    for name, s in (("scale", scale), ("shift", shift)):
        if s.shape != (1, c, 1, 1):
            raise ShapeError(f"{name} shape {s.shape} does not match {c} channels")
    if running_mean.shape != (1, c, 1, 1) or running_var.shape != (1, c, 1, 1):
        raise ShapeError(
            f"running stats shapes {running_mean.shape}/{running_var.shape} "
            f"do not match {c} channels"
        )

    if train:
        mu = x.values.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        xc = x.values - mu
        var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        mu = mu.astype(np.float32)
        var = var.astype(np.float32)
        xc = x.values - mu
        running_mean *= np.float32(1.0 - momentum)
        running_mean += np.float32(momentum) * mu
        running_var *= np.float32(1.0 - momentum)
        running_var += np.float32(momentum) * var
    else:
        mu = running_mean
        var = running_var
        xc = x.values - mu

    inv = (1.0 / np.sqrt(var + np.float32(_VAR_FLOOR))).astype(np.float32)
    xhat = xc * inv
    y = scale.values * xhat + shift.values

    def grad_fn(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3), keepdims=True).astype(np.float32)
        gshift = g.sum(axis=(0, 2, 3), keepdims=True).astype(np.float32)
        if not train:
            gx = (g * (scale.values * inv)).astype(np.float32)
            return gx, gscale, gshift
        gm = g.mean(axis=(0, 2, 3), keepdims=True)
        gxh = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
        gx = (scale.values * inv * (g - gm - xhat * gxh)).astype(np.float32)
        return gx, gscale, gshift

    return make_op(y, (x, scale, shift), grad_fn)


def softmax_channels(x) -> DiffArray:
    """Softmax over the channel axis, computed with max subtraction."""
    x = _as_diff(x)
    if x.shape[1] < 1:
        raise ShapeError(f"softmax needs at least one channel, got shape {x.shape}")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return ((s * (g - dot)).astype(np.float32),)

    return make_op(s, (x,), grad_fn)


# -- layer containers --------------------------------------------------


class Conv2d:
    """Kernel + bias pair bound to a stride and padding mode."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int,
                 rng, padding_mode: str = "zero"):
        w = rng.normal((out_ch, in_ch, kernel, kernel), std=0.02)
        self.weight = Parameter(w, f"{name}.w")
        self.bias = Parameter(np.zeros((1, out_ch, 1, 1), dtype=np.float32), f"{name}.b")
        self.stride = stride
        self.padding_mode = padding_mode

    def __call__(self, x: DiffArray) -> DiffArray:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding_mode)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class UpsampleConv2d:
    """Nearest x2 upscale followed by a stride-1 conv."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, rng,
                 factor: int = 2, padding_mode: str = "zero"):
        w = rng.normal((out_ch, in_ch, kernel, kernel), std=0.02)
        self.weight = Parameter(w, f"{name}.w")
        self.bias = Parameter(np.zeros((1, out_ch, 1, 1), dtype=np.float32), f"{name}.b")
        self.factor = factor
        self.padding_mode = padding_mode

    def __call__(self, x: DiffArray) -> DiffArray:
        return upsample_conv(x, self.weight, self.bias, self.factor, self.padding_mode)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class BatchNorm2d:
    """Learnable scale/shift plus running mean/var buffers."""

    def __init__(self, name: str, channels: int, momentum: float = 0.1):
        self.name = name
        self.scale = Parameter(np.ones((1, channels, 1, 1), dtype=np.float32), f"{name}.scale")
        self.shift = Parameter(np.zeros((1, channels, 1, 1), dtype=np.float32), f"{name}.shift")
        self.running_mean = np.zeros((1, channels, 1, 1), dtype=np.float32)
        self.running_var = np.ones((1, channels, 1, 1), dtype=np.float32)
        self.momentum = momentum

    def __call__(self, x: DiffArray, train: bool) -> DiffArray:
        return batch_norm(x, self.scale, self.shift, self.running_mean,
                          self.running_var, train, self.momentum)

    def parameters(self) -> list[Parameter]:
        return [self.scale, self.shift]

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }
