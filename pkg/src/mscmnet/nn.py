"""Parameter containers, layer modules, and the SGD optimizer.

Modules own named Parameters (name = dotted module path) plus non-learned
state buffers (batch-norm running stats). Initialization draws from an
explicit rng so model construction is reproducible.
"""

import numpy as np

from . import ops
from .errors import MscmError, ShapeError
from .ops import AttentionParams
from .tensor import Tensor


class Parameter:
    def __init__(self, name, data):
        self.name = name
        self.tensor = Tensor(np.ascontiguousarray(data), requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


class Module:
    """Minimal module: children and parameters discovered by attribute walk."""

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((val.name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters())
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        out.extend(item.named_parameters())
        names = [n for n, _ in out]
        if len(names) != len(set(names)):
            raise MscmError("duplicate parameter names in module tree")
        return out

    def named_buffers(self):
        """Non-learned state (running stats), as (name, module, state key)."""
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Module):
                out.extend(val.named_buffers())
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        out.extend(item.named_buffers())
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None


def kaiming(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, name, cin, cout, k, stride, pad, rng, dtype, bias=False):
        self.stride = stride
        self.pad = pad
        self.weight = Parameter(f"{name}.weight", kaiming(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype)) if bias else None

    def forward(self, x):
        b = self.bias.tensor if self.bias is not None else None
        return ops.conv2d(x, self.weight.tensor, b, stride=self.stride, pad=self.pad)


class BatchNorm(Module):
    def __init__(self, name, c, rng, dtype, eps=1e-5, momentum=0.1):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(c, dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(c, dtype))
        # Buffers share the parameter dtype so checkpoints round-trip exactly.
        self.state = {"mean": np.zeros(c, dtype), "var": np.ones(c, dtype)}

    def forward(self, x, training):
        return ops.batch_norm(
            x, self.gamma.tensor, self.beta.tensor, self.state,
            training=training, momentum=self.momentum, eps=self.eps,
        )

    def named_buffers(self):
        return [
            (f"{self.name}.running_mean", self, "mean"),
            (f"{self.name}.running_var", self, "var"),
        ]


class Linear(Module):
    def __init__(self, name, din, dout, rng, dtype, bias=True, weight_scale=1.0):
        w = kaiming(rng, (din, dout), din, dtype) * weight_scale
        self.weight = Parameter(f"{name}.weight", w.astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(dout, dtype)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = ops.add_rowvec(y, self.bias.tensor)
        return y


def init_attention_params(d, heads, rng, dtype, name="attn"):
    """Fresh AttentionParams with Kaiming projections and a 2d-wide MLP."""
    if d % heads != 0:
        raise ShapeError(f"attention dim {d} not divisible by {heads} heads")

    def lin(din, dout):
        return Tensor(kaiming(rng, (din, dout), din, dtype), requires_grad=True)

    def vec(dim):
        return Tensor(np.zeros(dim, dtype), requires_grad=True)

    return AttentionParams(
        wq=lin(d, d), bq=vec(d), wk=lin(d, d), bk=vec(d), wv=lin(d, d), bv=vec(d),
        wo=lin(d, d), bo=vec(d), w1=lin(d, 2 * d), b1=vec(2 * d), w2=lin(2 * d, d), b2=vec(d),
    )


class Attention(Module):
    """Module wrapper naming the AttentionParams tensors for checkpoints."""

    FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2")

    def __init__(self, name, d, heads, rng, dtype):
        self.heads = heads
        self.params = init_attention_params(d, heads, rng, dtype)
        for field in self.FIELDS:
            setattr(self, f"_p_{field}", _wrap_param(f"{name}.{field}", getattr(self.params, field)))

    def forward(self, q, k, v):
        return ops.multi_head_attention(q, k, v, self.heads, self.params)


def _wrap_param(name, tensor):
    p = Parameter.__new__(Parameter)
    p.name = name
    p.tensor = tensor
    return p


class SGD:
    """SGD with momentum and weight decay.

    v <- momentum*v + grad + weight_decay*w ; w <- w - lr*v ; grad cleared.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise MscmError("sgd: duplicate parameter names would share momentum buffers")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {p.name: np.zeros_like(p.tensor.data) for p in self.params}

    def step(self):
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                raise MscmError(f"sgd step: parameter {p.name} has no gradient")
            buf = self.buffers[p.name]
            buf *= self.momentum
            buf += g
            if self.weight_decay:
                buf += self.weight_decay * p.tensor.data
            p.tensor.data -= self.lr * buf
            p.tensor.grad = None
