# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled windowed kernels; drop-in twin of ``_npkernels``."""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

NAME = "cython"

ctypedef fused real:
    float
    double


cdef int _threads():
    import os
    try:
        return max(1, int(os.environ.get("PNEUMOSEG_THREADS", "0")) or os.cpu_count() or 1)
    except ValueError:
        return 1


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t nc, b, ch, i, j, y, xx, row, base
    cdef int nt = _threads()
    for nc in prange(n * c, nogil=True, num_threads=nt, schedule="static"):
        b = nc // c
        ch = nc % c
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for y in range(ho):
                    base = y * wo
                    for xx in range(wo):
                        o[b, row, base + xx] = x[b, ch, i + y * sh, j + xx * sw]
    return out


def col2im(const real[:, :, ::1] cols, shape, int kh, int kw, int sh, int sw, int ho, int wo):
    cdef Py_ssize_t n = shape[0], c = shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(tuple(shape), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t nc, b, ch, i, j, y, xx, row, base
    cdef int nt = _threads()
    for nc in prange(n * c, nogil=True, num_threads=nt, schedule="static"):
        b = nc // c
        ch = nc % c
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for y in range(ho):
                    base = y * wo
                    for xx in range(wo):
                        o[b, ch, i + y * sh, j + xx * sw] += cols[b, row, base + xx]
    return out


def maxpool_forward(const real[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int32)
    cdef real[:, :, :, ::1] o = out
    cdef int[:, :, :, ::1] a = arg
    cdef Py_ssize_t nc, b, ch, i, j, y, xx
    cdef int best_k
    cdef real best, v
    cdef int nt = _threads()
    for nc in prange(n * c, nogil=True, num_threads=nt, schedule="static"):
        b = nc // c
        ch = nc % c
        for y in range(ho):
            for xx in range(wo):
                best = x[b, ch, y * sh, xx * sw]
                best_k = 0
                for i in range(kh):
                    for j in range(kw):
                        v = x[b, ch, y * sh + i, xx * sw + j]
                        if v > best:
                            best = v
                            best_k = i * kw + j
                o[b, ch, y, xx] = best
                a[b, ch, y, xx] = best_k
    return out, arg


def maxpool_backward(const real[:, :, :, ::1] grad, const int[:, :, :, ::1] arg, shape, int kh, int kw, int sh, int sw):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros(tuple(shape), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t nc, b, ch, y, xx
    cdef int k
    cdef int nt = _threads()
    for nc in prange(n * c, nogil=True, num_threads=nt, schedule="static"):
        b = nc // c
        ch = nc % c
        # descending output order == ascending window position, the numpy accumulation order
        for y in range(ho - 1, -1, -1):
            for xx in range(wo - 1, -1, -1):
                k = arg[b, ch, y, xx]
                o[b, ch, y * sh + k // kw, xx * sw + k % kw] += grad[b, ch, y, xx]
    return out


def upsample2x(const real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t nc, b, ch, y, xx
    cdef real v
    cdef int nt = _threads()
    for nc in prange(n * c, nogil=True, num_threads=nt, schedule="static"):
        b = nc // c
        ch = nc % c
        for y in range(h):
            for xx in range(w):
                v = x[b, ch, y, xx]
                o[b, ch, 2 * y, 2 * xx] = v
                o[b, ch, 2 * y, 2 * xx + 1] = v
                o[b, ch, 2 * y + 1, 2 * xx] = v
                o[b, ch, 2 * y + 1, 2 * xx + 1] = v
    return out


def upsample2x_backward(const real[:, :, :, ::1] grad):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], h = grad.shape[2] // 2, w = grad.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t nc, b, ch, y, xx
    cdef int nt = _threads()
    for nc in prange(n * c, nogil=True, num_threads=nt, schedule="static"):
        b = nc // c
        ch = nc % c
        for y in range(h):
            for xx in range(w):
                o[b, ch, y, xx] = (grad[b, ch, 2 * y, 2 * xx] + grad[b, ch, 2 * y, 2 * xx + 1]
                                   + grad[b, ch, 2 * y + 1, 2 * xx] + grad[b, ch, 2 * y + 1, 2 * xx + 1])
    return out
