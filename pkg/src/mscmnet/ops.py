"""Differentiable operations.

Every op validates shapes strictly (no silent broadcasting), computes the
forward value with numpy, and registers a backward closure via `tensor.make`.
Backward closures return one gradient array per parent, or None for parents
that do not need one. All ops preserve dtype (float32 or float64).
"""

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ShapeError
from .tensor import Tensor, make

# ---------------------------------------------------------------------------
# elementwise and scalar ops


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype {a.dtype} vs {b.dtype}")


def add(a, b):
    _same_shape(a, b, "add")
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")

    def backward(g):
        return g * b.data, g * a.data

    return make(a.data * b.data, (a, b), backward)


def affine(x, a, b):
    """Elementwise a*x + b with python scalars a, b."""
    a = float(a)
    b = float(b)
    return make(a * x.data + b, (x,), lambda g: (a * g,))


def scale(x, s):
    return affine(x, s, 0.0)


def relu(x):
    def backward(g):
        return (np.where(x.data > 0, g, 0.0).astype(x.data.dtype, copy=False),)

    return make(np.maximum(x.data, 0), (x,), backward)


def sqrt(x):
    out = np.sqrt(x.data)

    def backward(g):
        # Zero subgradient where the output is zero keeps grads finite.
        denom = np.where(out > 0, 2.0 * out, 1.0)
        return (np.where(out > 0, g / denom, 0.0).astype(x.data.dtype, copy=False),)

    return make(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.data.ndim}")
    inv = tuple(np.argsort(axes))
    return make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    axis = int(axis)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != ref.data.ndim or t.data.dtype != ref.data.dtype:
            raise ShapeError("concat: rank or dtype mismatch")
        for ax in range(ref.data.ndim):
            if ax != axis and t.data.shape[ax] != ref.data.shape[ax]:
                raise ShapeError(f"concat: shape {t.shape} vs {ref.shape} on axis {ax}")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def narrow(x, axis, start, length):
    axis = int(axis)
    start = int(start)
    length = int(length)
    if not 0 <= start <= start + length <= x.data.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis {axis} of {x.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return make(np.ascontiguousarray(x.data[sl]), (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtype {a.dtype} vs {b.dtype}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make(a.data @ b.data, (a, b), backward)


def bmm(a, b):
    """Batched matmul: [G,N,K] @ [G,K,M] -> [G,N,M]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm: expected 3-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm: shapes {a.shape} @ {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"bmm: dtype {a.dtype} vs {b.dtype}")

    def backward(g):
        ga = g @ b.data.transpose(0, 2, 1) if a.requires_grad else None
        gb = a.data.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb

    return make(a.data @ b.data, (a, b), backward)


def add_rowvec(x, v):
    """[N, D] + [D] broadcast over rows (the only broadcast we allow)."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} + {v.shape}")
    return make(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    return make(
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=True),),
    )


def mean_all(x):
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=True),)

    return make(out, (x,), backward)


def sum_axis(x, axis):
    axis = int(axis)
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"sum_axis: axis {axis} out of range for {x.shape}")

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), x.data.shape[axis], axis=axis),)

    return make(x.data.sum(axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# normalization and softmax


def l2_normalize(x, eps=1e-6):
    """Row-normalize [N, D] by sqrt(sum(x^2) + eps^2): smooth everywhere."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize: expected [N, D], got {x.shape}")
    s = (x.data * x.data).sum(axis=1, keepdims=True) + eps * eps
    n = np.sqrt(s)
    out = x.data / n

    def backward(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return ((g / n - x.data * (dot / (s * n))).astype(x.data.dtype, copy=False),)

    return make(out, (x,), backward)


def softmax_lastaxis(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return ((p * (g - dot)).astype(x.data.dtype, copy=False),)

    return make(p, (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [B, K], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} for {logits.shape}")
    nb, nk = logits.data.shape
    if labels.min() < 0 or labels.max() >= nk:
        raise IndexError(f"label outside [0, {nk})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = np.asarray(-logp[np.arange(nb), labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(nb), labels] -= 1.0
        return ((g * p / nb).astype(logits.data.dtype, copy=False),)

    return make(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# convolution, pooling, resampling


def conv2d(x, w, bias=None, stride=1, pad=0):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}")
    b, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: {cin} input channels vs weight expecting {cin_w}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride {stride} < 1")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {cout} output channels")
    oh = K.conv_out_size(h, kh, stride, pad)
    ow = K.conv_out_size(wd, kw, stride, pad)

    cols = K.im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols).reshape(b, cout, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g2 = g.reshape(b, cout, oh * ow)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gx = K.col2im(gcols, x.data.shape, kh, kw, stride, pad)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make(out, parents, backward)


def max_pool2d(x, k, stride):
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected [B,C,H,W], got {x.shape}")
    if x.data.shape[2] < k or x.data.shape[3] < k:
        raise ShapeError(f"max_pool2d: window {k} larger than input {x.shape}")
    out, idx = K.maxpool_forward(x.data, k, stride)

    def backward(g):
        return (K.maxpool_backward(g, idx, x.data.shape, k, stride),)

    return make(out, (x,), backward)


def spatial_remap(x, mh, mw):
    """Separable linear resampling: out = Mh @ x @ Mw^T on the spatial axes.

    Mh [oh, H] and Mw [ow, W] are constant row-stochastic weight matrices;
    this one primitive covers adaptive average pooling and bilinear resize.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_remap: expected [B,C,H,W], got {x.shape}")
    if mh.shape[1] != x.data.shape[2] or mw.shape[1] != x.data.shape[3]:
        raise ShapeError(
            f"spatial_remap: maps {mh.shape}, {mw.shape} for spatial {x.data.shape[2:]}"
        )
    mh = mh.astype(x.data.dtype, copy=False)
    mw = mw.astype(x.data.dtype, copy=False)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make(out, (x,), backward)


def global_avg_pool(x):
    """[B,C,H,W] -> [B,C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [B,C,H,W], got {x.shape}")
    b, c, h, w = x.data.shape
    n = h * w

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.data.shape).astype(
            x.data.dtype, copy=True
        ),)

    return make(x.data.mean(axis=(2, 3)), (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Normalize channel dim 1 of a [B,C,H,W] or [N,C] tensor.

    `state` is a dict with numpy buffers `mean` and `var` [C]; train mode
    normalizes by (biased) batch statistics and folds them into the running
    buffers in place; eval mode reads the buffers.
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm: eps must be positive, got {eps}")
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected rank 2 or 4, got {x.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}, beta {beta.shape} for {c} channels")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    n = int(np.prod([x.data.shape[a] for a in axes]))
    if training and n < 2:
        raise ShapeError(f"batch_norm: train mode needs >= 2 values per channel, got {n}")

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        sdt = state["mean"].dtype
        state["mean"] = ((1.0 - momentum) * state["mean"] + momentum * mean).astype(sdt)
        state["var"] = ((1.0 - momentum) * state["var"] + momentum * var).astype(sdt)
    else:
        mean = state["mean"].astype(x.data.dtype)
        var = state["var"].astype(x.data.dtype)

    shape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype).reshape(shape)
    xhat = (x.data - mean.astype(x.data.dtype).reshape(shape)) * inv
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gscaled = g * gamma.data.reshape(shape)
        if training:
            mean_g = gscaled.mean(axis=axes).reshape(shape)
            mean_gx = (gscaled * xhat).mean(axis=axes).reshape(shape)
            dx = inv * (gscaled - mean_g - xhat * mean_gx)
        else:
            dx = inv * gscaled
        return dx.astype(x.data.dtype, copy=False), dgamma, dbeta

    return make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# attention


class AttentionParams:
    """Projection and MLP weights for multi_head_attention."""

    def __init__(self, wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2):
        self.wq, self.bq = wq, bq
        self.wk, self.bk = wk, bk
        self.wv, self.bv = wv, bv
        self.wo, self.bo = wo, bo
        self.w1, self.b1 = w1, b1
        self.w2, self.b2 = w2, b2

    def all(self):
        return [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.w1, self.b1, self.w2, self.b2,
        ]


def _project(x2, w, b):
    return add_rowvec(matmul(x2, w), b)


def _split_heads(x2, bsz, n, heads, dh):
    # [B*N, d] -> [B*heads, N, dh]
    t = reshape(x2, (bsz, n, heads, dh))
    t = transpose(t, (0, 2, 1, 3))
    return reshape(t, (bsz * heads, n, dh))


def attention_probs(q, k, heads):
    """Softmax attention weights [B*heads, N, N] from raw q, k inputs.

    Exposed separately so tests can assert on the weight distribution.
    """
    bsz, n, d = q.data.shape
    if d % heads != 0:
        raise ConfigError(f"attention: dim {d} not divisible by {heads} heads")
    dh = d // heads
    qh = _split_heads(reshape(q, (bsz * n, d)), bsz, n, heads, dh)
    kh = _split_heads(reshape(k, (bsz * n, d)), bsz, n, heads, dh)
    scores = scale(bmm(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    return softmax_lastaxis(scores)


def multi_head_attention(q, k, v, heads, params):
    """Scaled dot-product attention plus a one-hidden-layer MLP residual.

    q, k, v: [B, N, d]. Each is linearly projected; per head the weights are
    softmax(q k^T / sqrt(d/heads)); heads are concatenated and output-projected
    to y; the result is y + mlp(y).
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.data.ndim != 3:
            raise ShapeError(f"attention: {name} must be [B,N,d], got {t.shape}")
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise ShapeError(f"attention: shapes {q.shape}, {k.shape}, {v.shape}")
    bsz, n, d = q.data.shape
    if d % heads != 0:
        raise ConfigError(f"attention: dim {d} not divisible by {heads} heads")
    dh = d // heads

    q2 = _project(reshape(q, (bsz * n, d)), params.wq, params.bq)
    k2 = _project(reshape(k, (bsz * n, d)), params.wk, params.bk)
    v2 = _project(reshape(v, (bsz * n, d)), params.wv, params.bv)
    qh = _split_heads(q2, bsz, n, heads, dh)
    kh = _split_heads(k2, bsz, n, heads, dh)
    vh = _split_heads(v2, bsz, n, heads, dh)

    scores = scale(bmm(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    probs = softmax_lastaxis(scores)
    ctx = bmm(probs, vh)

    ctx = reshape(ctx, (bsz, heads, n, dh))
    ctx = transpose(ctx, (0, 2, 1, 3))
    y = _project(reshape(ctx, (bsz * n, d)), params.wo, params.bo)

    hidden = relu(_project(y, params.w1, params.b1))
    out = add(y, _project(hidden, params.w2, params.b2))
    return reshape(out, (bsz, n, d))
