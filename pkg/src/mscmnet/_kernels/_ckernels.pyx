# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: patch unfold/fold and max pooling.

Per-cell accumulation order matches `numpy_backend` exactly, so the two
backends produce bit-identical float results.
"""

import numpy as np

cimport cython

NAME = "compiled"

ctypedef fused real:
    float
    double


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col_core(real[:, :, :, ::1] xp, real[:, :, ::1] out,
                 int kh, int kw, int stride, int oh, int ow):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t n, ch, i, j, y, x, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            for x in range(ow):
                                out[n, row, y * ow + x] = xp[n, ch, y * stride + i, x * stride + j]


def _col2im_core(real[:, :, ::1] cols, real[:, :, :, ::1] xp,
                 int kh, int kw, int stride, int oh, int ow):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t n, ch, i, j, y, x, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            for x in range(ow):
                                xp[n, ch, y * stride + i, x * stride + j] += cols[n, row, y * ow + x]


def _maxpool_fwd_core(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                      long long[:, :, :, ::1] idx, int k, int stride):
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t w = x.shape[3]
    cdef Py_ssize_t n, ch, y, xo, i, j, bh, bw
    cdef real best
    cdef Py_ssize_t besth, bestw
    with nogil:
        for n in range(b):
            for ch in range(c):
                for y in range(oh):
                    for xo in range(ow):
                        bh = y * stride
                        bw = xo * stride
                        best = x[n, ch, bh, bw]
                        besth = bh
                        bestw = bw
                        for i in range(k):
                            for j in range(k):
                                if x[n, ch, bh + i, bw + j] > best:
                                    best = x[n, ch, bh + i, bw + j]
                                    besth = bh + i
                                    bestw = bw + j
                        out[n, ch, y, xo] = best
                        idx[n, ch, y, xo] = besth * w + bestw


def _maxpool_bwd_core(real[:, :, :, ::1] grad, long long[:, :, :, ::1] idx,
                      real[:, :, ::1] dx):
    cdef Py_ssize_t b = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t n, ch, y, x
    with nogil:
        for n in range(b):
            for ch in range(c):
                for y in range(oh):
                    for x in range(ow):
                        dx[n, ch, idx[n, ch, y, x]] += grad[n, ch, y, x]


def im2col(x, kh, kw, stride, pad):
    """Unfold [B,C,H,W] into patch columns [B, C*kh*kw, OH*OW]."""
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad > 0:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    out = np.empty((b, c * kh * kw, oh * ow), dtype=x.dtype)
    _im2col_core(xp, out, kh, kw, stride, oh, ow)
    return out


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add columns back onto the input grid."""
    cols = np.ascontiguousarray(cols)
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    _col2im_core(cols, xp, kh, kw, stride, oh, ow)
    if pad > 0:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool_forward(x, k, stride):
    """Max pool [B,C,H,W] -> (values, flat argmax over h*W+w per window).

    Ties resolve to the first cell in row-major window scan order.
    """
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, 0)
    ow = conv_out_size(w, k, stride, 0)
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    idx = np.empty((b, c, oh, ow), dtype=np.int64)
    _maxpool_fwd_core(x, out, idx, k, stride)
    return out, idx


def maxpool_backward(grad, idx, x_shape, k, stride):
    grad = np.ascontiguousarray(grad)
    idx = np.ascontiguousarray(idx)
    b, c, h, w = x_shape
    dx = np.zeros((b, c, h * w), dtype=grad.dtype)
    _maxpool_bwd_core(grad, idx, dx)
    return dx.reshape(b, c, h, w)
