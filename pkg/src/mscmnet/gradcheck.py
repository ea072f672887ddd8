"""Central finite-difference gradient checking.

The oracle perturbs one coordinate at a time: (f(x+h) - f(x-h)) / 2h, always
in float64, and compares against the autograd gradient with relative error
|a - n| / max(|a|, |n|, 1e-6).

Coordinates whose first estimate fails are re-estimated at h/8 and h/64
before being reported: a near-kink input (relu, max pool) can flip branches
inside the +-h interval, which shrinking h resolves, while a genuinely wrong
backward fails at every step size.
"""

import numpy as np

from .tensor import no_grad

REL_FLOOR = 1e-6


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def _eval(f, inputs):
    with no_grad():
        out = f(*inputs)
    return out.item()


def gradcheck(f, inputs, step=1e-3, tol=1e-3, rng=None, max_coords=64, refine=True):
    """Check autograd gradients of scalar-valued f against central differences.

    inputs: list of float64 Tensors with requires_grad=True. Large tensors are
    subsampled to max_coords coordinates (deterministic given rng).
    Returns {"max_rel_err": float, "passed": bool, "num_coords": int}.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
        t.grad = None

    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()

    max_err = 0.0
    num = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        for c in coords:
            num += 1
            orig = flat[c]
            err = np.inf
            for h in ((step, step / 8.0, step / 64.0) if refine else (step,)):
                flat[c] = orig + h
                fp = _eval(f, inputs)
                flat[c] = orig - h
                fm = _eval(f, inputs)
                flat[c] = orig
                fd = (fp - fm) / (2.0 * h)
                err = min(err, _rel_err(gflat[c], fd))
                if err <= tol:
                    break
            max_err = max(max_err, err)
    return {"max_rel_err": max_err, "passed": max_err <= tol, "num_coords": num}


# ---------------------------------------------------------------------------
# the named check suite (used by tests and the gradcheck command)


def _t(rng, *shape, lo=-1.0, hi=1.0):
    from .tensor import Tensor

    return Tensor(rng.uniform(lo, hi, shape).astype(np.float64), requires_grad=True)


def _t_off_kink(rng, *shape, margin=0.05):
    # Magnitudes >= margin so relu branches cannot flip under +-h.
    from .tensor import Tensor

    mag = rng.uniform(margin, 1.0, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor((mag * sign).astype(np.float64), requires_grad=True)


def _t_separated(rng, *shape):
    # Well-separated values so max pooling has no near-ties.
    from .tensor import Tensor

    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * 0.1 + rng.uniform(0, 0.01, n)
    return Tensor(vals.reshape(shape), requires_grad=True)


def _check_ops(seed, step, tol):
    from . import interp, ops
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    checks = {}

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    checks["add"] = gradcheck(lambda x, y: ops.sum_all(ops.mul(ops.add(x, y), y)), [a, b], step, tol, rng)
    checks["sub"] = gradcheck(lambda x, y: ops.sum_all(ops.mul(ops.sub(x, y), x)), [a, b], step, tol, rng)
    checks["mul"] = gradcheck(lambda x, y: ops.sum_all(ops.mul(x, y)), [a, b], step, tol, rng)
    checks["affine"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.affine(x, 1.7, -0.3), x)), [_t(rng, 5)], step, tol, rng
    )
    checks["relu"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.relu(x), x)), [_t_off_kink(rng, 4, 5)], step, tol, rng
    )
    checks["sqrt"] = gradcheck(
        lambda x: ops.sum_all(ops.sqrt(x)), [_t(rng, 4, 3, lo=0.1, hi=2.0)], step, tol, rng
    )
    checks["reshape"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.reshape(x, (6, 2)), ops.reshape(x, (6, 2)))),
        [_t(rng, 3, 4)], step, tol, rng,
    )
    checks["transpose"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.transpose(x, (1, 0, 2)), ops.transpose(x, (1, 0, 2)))),
        [_t(rng, 2, 3, 4)], step, tol, rng,
    )
    x1, x2 = _t(rng, 2, 3), _t(rng, 4, 3)
    checks["concat"] = gradcheck(
        lambda u, v: ops.sum_all(ops.mul(ops.concat([u, v], 0), ops.concat([v, u], 0))),
        [x1, x2], step, tol, rng,
    )
    checks["narrow"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.narrow(x, 1, 1, 2), ops.narrow(x, 1, 0, 2))),
        [_t(rng, 3, 4)], step, tol, rng,
    )
    m1, m2 = _t(rng, 3, 4), _t(rng, 4, 2)
    checks["matmul"] = gradcheck(
        lambda u, v: ops.sum_all(ops.mul(ops.matmul(u, v), ops.matmul(u, v))),
        [m1, m2], step, tol, rng,
    )
    b1, b2 = _t(rng, 2, 3, 4), _t(rng, 2, 4, 3)
    checks["bmm"] = gradcheck(
        lambda u, v: ops.sum_all(ops.mul(ops.bmm(u, v), ops.bmm(u, v))), [b1, b2], step, tol, rng
    )
    xr, vr = _t(rng, 4, 3), _t(rng, 3)
    checks["add_rowvec"] = gradcheck(
        lambda u, v: ops.sum_all(ops.mul(ops.add_rowvec(u, v), u)), [xr, vr], step, tol, rng
    )
    checks["sum_axis"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.sum_axis(x, 1), ops.sum_axis(x, 1))),
        [_t(rng, 3, 4)], step, tol, rng,
    )
    checks["mean_all"] = gradcheck(
        lambda x: ops.mean_all(ops.mul(x, x)), [_t(rng, 3, 4)], step, tol, rng
    )
    checks["l2_normalize"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.l2_normalize(x), x)),
        [_t(rng, 3, 5, lo=0.2, hi=1.0)], step, tol, rng,
    )
    checks["softmax"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.softmax_lastaxis(x), x)), [_t(rng, 2, 3, 4)], step, tol, rng
    )
    labels = np.random.default_rng(seed + 1).integers(0, 5, size=3)
    checks["softmax_cross_entropy"] = gradcheck(
        lambda x: ops.softmax_cross_entropy(x, labels), [_t(rng, 3, 5)], step, tol, rng
    )
    checks["global_avg_pool"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.global_avg_pool(x), ops.global_avg_pool(x))),
        [_t(rng, 2, 3, 4, 5)], step, tol, rng,
    )
    mh = interp.avg_pool_matrix(6, 3, np.float64)
    mw = interp.bilinear_matrix(5, 7, np.float64)
    checks["spatial_remap"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.spatial_remap(x, mh, mw), ops.spatial_remap(x, mh, mw))),
        [_t(rng, 2, 3, 6, 5)], step, tol, rng,
    )

    xc, wc, bc = _t(rng, 2, 3, 8, 8), _t(rng, 4, 3, 3, 3), _t(rng, 4)

    def f_conv(x, w, bias):
        y = ops.conv2d(x, w, bias, stride=2, pad=1)
        return ops.sum_all(ops.mul(y, y))

    checks["conv2d"] = gradcheck(f_conv, [xc, wc, bc], step, tol, rng)
    checks["max_pool2d"] = gradcheck(
        lambda x: ops.sum_all(ops.mul(ops.max_pool2d(x, 2, 2), ops.max_pool2d(x, 2, 2))),
        [_t_separated(rng, 2, 3, 6, 6)], step, tol, rng,
    )

    return checks


def _check_batch_norm(seed, step, tol):
    from . import ops

    rng = np.random.default_rng(seed)
    x, gamma, beta = _t(rng, 4, 2, 3, 3), _t(rng, 2, lo=0.5, hi=1.5), _t(rng, 2)
    checks = {}

    def fresh_state():
        return {"mean": np.zeros(2), "var": np.ones(2)}

    def f_train(xx, gg, bb):
        y = ops.batch_norm(xx, gg, bb, fresh_state(), training=True)
        return ops.sum_all(ops.mul(y, y))

    checks["batch_norm_train"] = gradcheck(f_train, [x, gamma, beta], step, tol, rng)

    state = {"mean": rng.uniform(-0.5, 0.5, 2), "var": rng.uniform(0.5, 1.5, 2)}

    def f_eval(xx, gg, bb):
        y = ops.batch_norm(xx, gg, bb, state, training=False)
        return ops.sum_all(ops.mul(y, y))

    checks["batch_norm_eval"] = gradcheck(f_eval, [x, gamma, beta], step, tol, rng)
    return checks


def _check_attention(seed, step, tol):
    from . import ops
    from .nn import init_attention_params

    rng = np.random.default_rng(seed)
    d, heads = 8, 2
    params = init_attention_params(d, heads, rng, dtype=np.float64)
    q, k, v = _t(rng, 2, 4, d, lo=-0.5, hi=0.5), _t(rng, 2, 4, d, lo=-0.5, hi=0.5), _t(rng, 2, 4, d, lo=-0.5, hi=0.5)
    inputs = [q, k, v] + params.all()

    def f(qq, kk, vv, *ps):
        y = ops.multi_head_attention(qq, kk, vv, heads, params)
        return ops.sum_all(ops.mul(y, y))

    return {"multi_head_attention": gradcheck(f, inputs, step, tol, rng, max_coords=12)}


def _check_alb(seed, step, tol):
    from . import ops
    from .model import AttentionLink

    rng = np.random.default_rng(seed)
    alb = AttentionLink(
        deep_ch=8, shallow_ch=4, attn_dim=8, heads=2, token_grid=(3, 2),
        mix_alpha=0.1, rng=rng, dtype=np.float64,
    )
    # the model zero-inits the output scale; randomize it so the check
    # exercises gradients through the whole branch
    alb.out_bn.gamma.data[...] = rng.uniform(0.5, 1.5, alb.out_bn.gamma.data.shape)
    f_deep = _t(rng, 2, 8, 6, 4, lo=-0.5, hi=0.5)
    g_shallow = _t(rng, 2, 4, 12, 8, lo=-0.5, hi=0.5)
    params = [p.tensor for p in alb.parameters()]

    def f(fd, gs, *ps):
        y = alb.forward(fd, gs, training=True)
        return ops.sum_all(ops.mul(y, y))

    return {"alb": gradcheck(f, [f_deep, g_shallow] + params, step, tol, rng, max_coords=8)}


def _check_total_loss(seed, step, tol):
    from . import ops
    from .losses import LossConfig, total_loss
    from .model import StreamEmbeddings

    rng = np.random.default_rng(seed)
    p, k, dim, classes = 3, 2, 6, 4
    ids = np.repeat(np.arange(p), k)
    streams_v = [_t(rng, p * k, dim, lo=-0.8, hi=0.8) for _ in range(2)]
    streams_t = [_t(rng, p * k, dim, lo=-0.8, hi=0.8) for _ in range(2)]
    logits = _t(rng, 4 * p * k, classes)
    labels = np.concatenate([ids, ids, ids, ids])
    cfg = LossConfig(margin_rho=1.5)

    def f(sv0, sv1, st0, st1, lg):
        embs = StreamEmbeddings(
            streams_v=[sv0, sv1], streams_t=[st0, st1],
            ids_v=ids, ids_t=ids, logits=lg,
        )
        loss, _ = total_loss(embs, labels, cfg)
        return loss

    return {
        "total_loss": gradcheck(f, streams_v + streams_t + [logits], step, tol, rng, max_coords=16)
    }


SUITE_GROUPS = ("ops", "batch_norm", "attention", "alb", "total_loss")


def run_suite(seeds=20, step=1e-3, tol=1e-3, groups=SUITE_GROUPS):
    """Run every named check over `seeds` seeds; returns {name: max_rel_err}."""
    results = {}
    for seed in range(seeds):
        per_seed = {}
        if "ops" in groups:
            per_seed.update(_check_ops(seed, step, tol))
        if "batch_norm" in groups:
            per_seed.update(_check_batch_norm(seed, step, tol))
        if "attention" in groups:
            per_seed.update(_check_attention(seed, step, tol))
        if "alb" in groups:
            per_seed.update(_check_alb(seed, step, tol))
        if "total_loss" in groups:
            per_seed.update(_check_total_loss(seed, step, tol))
        for name, rep in per_seed.items():
            results[name] = max(results.get(name, 0.0), rep["max_rel_err"])
    return results
