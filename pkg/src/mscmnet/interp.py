"""Constant weight matrices for separable spatial resampling.

Both builders return row-stochastic [out, in] matrices consumed by
`ops.spatial_remap`; results are cached per (sizes, dtype).
"""

import functools

import numpy as np


@functools.lru_cache(maxsize=None)
def _avg_pool_rows(n_in, n_out):
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -(-((i + 1) * n_in) // n_out)  # ceil division
        m[i, start:end] = 1.0 / (end - start)
    return m


@functools.lru_cache(maxsize=None)
def _bilinear_rows(n_in, n_out):
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def avg_pool_matrix(n_in, n_out, dtype):
    """Adaptive average pooling weights: row i means cells [i*n/out, ceil)."""
    return _avg_pool_rows(int(n_in), int(n_out)).astype(dtype)


def bilinear_matrix(n_in, n_out, dtype):
    """Bilinear interpolation weights with half-pixel centers."""
    return _bilinear_rows(int(n_in), int(n_out)).astype(dtype)
