"""Differentiable layer primitives and their parameter containers.

Activations use the NCHW layout. Convolution is cross-correlation computed
as a sum of kernel-offset GEMMs over a flattened, zero-padded copy of the
input: for offset (i, j) the input window of every output pixel is the
same contiguous column range shifted by ``i * Wp + j``, so each offset is
a single BLAS call with no im2col buffer.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, parameter


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, c_in, h, w = x_shape
    c_out, wc_in, kh, kw = w_shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d expects {wc_in} input channels, got {c_in}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding {stride}/{padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if hp < kh or wp < kw or ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    return n, c_in, h, w, c_out, kh, kw, hp, wp, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c_in, h, w, c_out, kh, kw, hp, wp, ho, wo = _conv_geometry(x.shape, weight.shape, stride, padding)

    xp = np.zeros((c_in, n, hp, wp))
    xp[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    xf = xp.reshape(c_in, -1)
    total = xf.shape[1]
    span = total - ((kh - 1) * wp + (kw - 1))
    # per-offset weight slices must be contiguous to stay on the BLAS path
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))

    acc = np.zeros((c_out, total))
    head = acc[:, :span]
    tmp = np.empty((c_out, span))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            np.matmul(wk[i, j], xf[:, off : off + span], out=tmp)
            head += tmp
    full_h, full_w = hp - kh + 1, wp - kw + 1
    y = acc.reshape(c_out, n, hp, wp)[:, :, :full_h:stride, :full_w:stride].transpose(1, 0, 2, 3)
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gp = np.zeros((c_out, n, hp, wp))
        gp[:, :, :full_h:stride, :full_w:stride] = g.transpose(1, 0, 2, 3)
        gf = gp.reshape(c_out, -1)[:, :span]
        gx = gw = gb = None
        if weight.requires_grad:
            gwk = np.empty((kh, kw, c_out, c_in))
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    gwk[i, j] = gf @ xf[:, off : off + span].T
            gw = gwk.transpose(2, 3, 0, 1)
        if x.requires_grad:
            wkt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))
            gxf = np.zeros((c_in, total))
            tmp = np.empty((c_in, span))
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    np.matmul(wkt[i, j], gf, out=tmp)
                    gxf[:, off : off + span] += tmp
            gx = gxf.reshape(c_in, n, hp, wp)[:, :, padding : padding + h, padding : padding + w]
            gx = gx.transpose(1, 0, 2, 3)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(y, parents, bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    seed_stats: bool = False,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running statistics are updated in place as
    ``run = momentum * run + (1 - momentum) * batch`` using the biased batch
    variance; they never enter the graph. With ``seed_stats`` the running
    statistics are overwritten by the batch statistics instead (used for the
    first batch a layer ever sees).
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm expects NCHW input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must have shape ({c},)")
    a = x.data
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ContractError("training-mode batch_norm needs at least 2 values per channel")
        mean = a.mean(axis=(0, 2, 3))
        var = a.var(axis=(0, 2, 3))
        if seed_stats:
            running_mean[...] = mean
            running_var[...] = var
        else:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        m = None
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1)
    xhat = (a - mean.reshape(1, c, 1, 1)) * inv_std
    y = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        scale = g4 * inv_std
        if m is None:
            return g * scale, ggamma, gbeta
        # batch-stat path: dx = gamma/std * (g - mean(g) - xhat * mean(g * xhat))
        gx = xhat * (-ggamma / m).reshape(1, c, 1, 1)
        gx += g
        gx -= (gbeta / m).reshape(1, c, 1, 1)
        gx *= scale
        return gx, ggamma, gbeta

    return Tensor._make(y, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    e = np.exp(-np.abs(a))
    s = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties go to the lowest flat index inside the window.
    """
    if k != stride:
        raise ShapeError("only non-overlapping pooling (k == stride) is supported")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"max_pool2d needs H, W >= {k}, got {h}x{w}")
    ho, wo = h // k, w // k
    win = x.data[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        gx = np.zeros((n, c, h, w))
        gx[:, :, : ho * k, : wo * k] = gw
        return (gx,)

    return Tensor._make(y, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-shift."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return Tensor._make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


class Module:
    """Minimal parameter container with dotted names and a train/infer switch."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, padding: int = 0):
        if kernel_size not in (1, 3):
            raise ShapeError("kernel size must be 1 or 3")
        self.stride = stride
        self.padding = padding
        self.weight = parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = parameter(np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Batch norm whose running statistics start from the first training batch.

    Starting from fixed (0, 1) statistics leaves inference badly mis-scaled
    for dozens of batches whenever activations have small variance.
    """

    _buffers = ("running_mean", "running_var", "batches_seen")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        if not 0 < momentum < 1:
            raise ContractError("momentum must lie in (0, 1)")
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.batches_seen = np.zeros(1)

    def reset_running_stats(self) -> None:
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0
        self.batches_seen[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        y = batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps, seed_stats=self.batches_seen[0] == 0,
        )
        if self.training:
            self.batches_seen += 1
        return y
