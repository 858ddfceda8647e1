"""Differentiable operators for the segmentation network.

The operator set is exactly what a ResNet34-UNet needs: convolution, max
pooling, batch normalization, ReLU, sigmoid, nearest 2x upsampling, channel
concatenation, residual add, plus the small reductions the losses use.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, record, recording


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an int pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _check_4d(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D N,C,H,W input, got shape {x.shape}")


def _out_extent(size, k, s, p, axis, op):
    if size + 2 * p < k:
        raise ShapeError(f"{op}: padded {axis} {size}+2*{p} is smaller than kernel {k}")
    return (size + 2 * p - k) // s + 1


def _pad(x, ph, pw, value=0.0):
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * ph, w + 2 * pw), value, dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _crop(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return x[:, :, ph:x.shape[2] - ph, pw:x.shape[3] - pw]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col and one batched GEMM."""
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be Cout,Cin,kh,kw, got {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"conv2d: bad stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci} (weight shape {weight.shape})")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} output channels")
    if x.dtype != weight.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {weight.dtype}")
    ho = _out_extent(h, kh, sh, ph, "height", "conv2d")
    wo = _out_extent(w, kw, sw, pw, "width", "conv2d")

    pointwise = kh == 1 and kw == 1 and ph == 0 and pw == 0
    if pointwise:
        xs = x.data if sh == 1 and sw == 1 else np.ascontiguousarray(x.data[:, :, ::sh, ::sw])
        cols = xs.reshape(n, c, ho * wo)
        xp_shape = None
    else:
        xp = _pad(x.data, ph, pw)
        xp_shape = xp.shape
        cols = kernels.backend.im2col(xp, kh, kw, sh, sw, ho, wo)
        del xp
    wm = weight.data.reshape(co, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    result = Tensor(out.reshape(n, co, ho, wo))

    if recording(x, weight, bias):
        def backward(g):
            g2 = g.reshape(n, co, ho * wo)
            gw = None
            if weight.requires_grad:
                gw = np.zeros_like(wm)
                for b in range(n):
                    gw += g2[b] @ cols[b].T
                gw = gw.reshape(weight.shape)
            gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
            gx = None
            if x.requires_grad:
                dcols = np.matmul(wm.T, g2)
                if pointwise:
                    if sh == 1 and sw == 1:
                        gx = dcols.reshape(x.shape)
                    else:
                        gx = np.zeros(x.shape, dtype=x.dtype)
                        gx[:, :, ::sh, ::sw] = dcols.reshape(n, c, ho, wo)
                else:
                    gx = _crop(kernels.backend.col2im(dcols, xp_shape, kh, kw, sh, sw, ho, wo), ph, pw)
            return gx, gw, gb

        record("conv2d", (x, weight, bias), result, backward)
    return result


def maxpool2d(x: Tensor, kernel=2, stride=None, padding=0) -> Tensor:
    """Window maximum; gradient goes to the first maximal element (row-major)."""
    _check_4d(x, "maxpool2d")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho = _out_extent(h, kh, sh, ph, "height", "maxpool2d")
    wo = _out_extent(w, kw, sw, pw, "width", "maxpool2d")
    xp = _pad(x.data, ph, pw, value=-np.inf)
    out, arg = kernels.backend.maxpool_forward(xp, kh, kw, sh, sw, ho, wo)
    result = Tensor(out)
    shape = xp.shape
    del xp

    def backward(g):
        g = np.ascontiguousarray(g)
        return (_crop(kernels.backend.maxpool_backward(g, arg, shape, kh, kw, sh, sw), ph, pw),)

    record("maxpool2d", (x,), result, backward)
    return result


class BatchNormState:
    """Per-channel affine parameters and running statistics.

    ``momentum=None`` switches running-stat updates to a cumulative average
    over all batches seen since the last :meth:`reset_running_stats`; this is
    how averaged weights get their statistics re-estimated.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.num_batches = 0

    def reset_running_stats(self):
        self.running_mean[...] = 0
        self.running_var[...] = 1
        self.num_batches = 0


def batchnorm2d(x: Tensor, state: BatchNormState, training: bool | None = None) -> Tensor:
    _check_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"batchnorm2d: input has {c} channels, state has {state.channels}")
    training = state.training if training is None else training
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    count = n * h * w
    if training:
        if count < 2:
            raise ShapeError(f"batchnorm2d: batch statistics need at least 2 values per channel, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = np.mean(centered * centered, axis=(0, 2, 3))
        unbiased = var * (count / (count - 1))
        if state.momentum is None:
            k = state.num_batches
            state.running_mean[...] = (state.running_mean * k + mean) / (k + 1)
            state.running_var[...] = (state.running_var * k + unbiased) / (k + 1)
        else:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * unbiased
        state.num_batches += 1
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        del centered
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(x.dtype)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma + beta
    result = Tensor(out)

    if recording(x, state.gamma, state.beta):
        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3)) if state.gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if state.beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g * gamma
                if training:
                    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gx = (dxhat - s1 / count - xhat * (s2 / count)) * inv_std.reshape(1, c, 1, 1)
                else:
                    gx = dxhat * inv_std.reshape(1, c, 1, 1)
            return gx, gg, gb

        record("batchnorm2d", (x, state.gamma, state.beta), result, backward)
    return result


def relu(x: Tensor) -> Tensor:
    result = Tensor(np.maximum(x.data, 0))

    def backward(g):
        return (g * (x.data > 0),)

    record("relu", (x,), result, backward)
    return result


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; saturated values are held one ulp inside (0, 1)."""
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    info = np.finfo(x.dtype)
    np.clip(s, info.tiny, 1 - info.epsneg, out=s)
    result = Tensor(s)

    def backward(g):
        return (g * s * (1 - s),)

    record("sigmoid", (x,), result, backward)
    return result


def upsample_nearest_2x(x: Tensor) -> Tensor:
    _check_4d(x, "upsample_nearest_2x")
    result = Tensor(kernels.backend.upsample2x(x.data))

    def backward(g):
        return (kernels.backend.upsample2x_backward(np.ascontiguousarray(g)),)

    record("upsample_nearest_2x", (x,), result, backward)
    return result


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N,H,W must match, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    result = Tensor(np.concatenate([a.data, b.data], axis=1))

    def backward(g):
        return g[:, :ca], g[:, ca:]

    record("concat_channels", (a, b), result, backward)
    return result


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum of equal shapes; ``b`` may also be a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        result = Tensor((a.data + b).astype(a.dtype))
        record("add_scalar", (a,), result, lambda g: (g,))
        return result
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    result = Tensor(a.data + b.data)
    record("add", (a, b), result, lambda g: (g, g))
    return result


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        k = float(b)
        result = Tensor((a.data * k).astype(a.dtype))
        record("mul_scalar", (a,), result, lambda g: (g * k,))
        return result
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    result = Tensor(a.data * b.data)
    record("mul", (a, b), result, lambda g: (g * b.data, g * a.data))
    return result


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    result = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    shape = x.shape
    record("sum", (x,), result, lambda g: (np.broadcast_to(g, shape),))
    return result


def mean(x: Tensor) -> Tensor:
    n = x.size
    result = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    shape = x.shape
    record("mean", (x,), result, lambda g: (np.broadcast_to(g / n, shape),))
    return result


def flip_horizontal(x: Tensor) -> Tensor:
    """Reverse the last axis (used by test-time augmentation)."""
    result = Tensor(x.data[..., ::-1])
    record("flip_horizontal", (x,), result, lambda g: (g[..., ::-1],))
    return result
