"""Pure-numpy implementations of the windowed kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and bit-identical results for the memory-movement kernels (im2col, col2im,
upsample). Inputs are assumed already padded.
"""
import numpy as np

NAME = "numpy"


def _windows(x, kh, kw, sh, sw, ho, wo):
    n, c = x.shape[:2]
    s = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw),
        writeable=False,
    )


def im2col(x, kh, kw, sh, sw, ho, wo):
    """(N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo), row order (c, i, j)."""
    n, c = x.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    cols[...] = _windows(x, kh, kw, sh, sw, ho, wo)
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, sh, sw, ho, wo):
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def maxpool_forward(x, kh, kw, sh, sw, ho, wo):
    """Return (max values, argmax index within the kh*kw window).

    Ties resolve to the first element in row-major window order.
    """
    n, c = x.shape[:2]
    win = _windows(x, kh, kw, sh, sw, ho, wo)
    win = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, ho, wo, kh * kw)
    arg = np.argmax(win, axis=-1).astype(np.int32)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(grad, arg, shape, kh, kw, sh, sw):
    n, c, ho, wo = grad.shape
    out = np.zeros(shape, dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            hit = arg == i * kw + j
            if not hit.any():
                continue
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += np.where(hit, grad, 0)
    return out


def upsample2x(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h, 2, w, 2), dtype=x.dtype)
    out[...] = x[:, :, :, None, :, None]
    return out.reshape(n, c, 2 * h, 2 * w)


def upsample2x_backward(grad):
    # fixed summation order so both backends round identically
    g = grad
    return g[:, :, 0::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 0::2] + g[:, :, 1::2, 1::2]
