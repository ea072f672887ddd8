"""Pure-numpy implementations of the hot kernels.

These mirror `_ckernels.pyx` exactly, including per-cell accumulation order,
so the two backends produce bit-identical results and can be swapped freely.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "numpy"


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold [B,C,H,W] into patch columns [B, C*kh*kw, OH*OW]."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad > 0:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    sb, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(b, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add columns back onto the input grid."""
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad > 0:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool_forward(x, k, stride):
    """Max pool [B,C,H,W] -> (values, flat argmax over h*W+w per window).

    Ties resolve to the first cell in row-major window scan order.
    """
    b, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, 0)
    ow = conv_out_size(w, k, stride, 0)
    xc = np.ascontiguousarray(x)
    sb, sc, sh, sw = xc.strides
    windows = as_strided(
        xc,
        shape=(b, c, oh, ow, k, k),
        strides=(sb, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(b, c, oh, ow, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    oh_idx = np.arange(oh)[:, None] * stride
    ow_idx = np.arange(ow)[None, :] * stride
    abs_h = oh_idx[None, None] + local // k
    abs_w = ow_idx[None, None] + local % k
    idx = (abs_h * w + abs_w).astype(np.int64)
    return np.ascontiguousarray(out), idx


def maxpool_backward(grad, idx, x_shape, k, stride):
    b, c, h, w = x_shape
    dx = np.zeros((b, c, h * w), dtype=grad.dtype)
    bi = np.arange(b)[:, None, None]
    ci = np.arange(c)[None, :, None]
    flat_idx = idx.reshape(b, c, -1)
    np.add.at(dx, (bi, ci, flat_idx), grad.reshape(b, c, -1))
    return dx.reshape(b, c, h, w)
