"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps a float32 or float64 numpy array. Operations (see `ops`)
build a graph by recording parent tensors and a backward closure; calling
`backward()` on a scalar output walks the graph once in reverse topological
order and accumulates gradients into the leaves.

Float64 exists purely for gradient checking; training runs in float32.
"""

import contextlib

import numpy as np

from .errors import ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, np.ndarray):
            # 0-d arithmetic yields numpy scalars; keep their precision.
            if isinstance(data, np.floating):
                data = np.asarray(data)
            else:
                data = np.asarray(data, dtype=np.float32)
        if data.dtype not in _FLOAT_DTYPES:
            raise ShapeError(f"tensors are float32 or float64, got {data.dtype}")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self):
        """Same data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's `.grad`."""
        if not self.requires_grad:
            raise ShapeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        # Iterative DFS postorder; recursion would overflow on deep graphs.
        # Nodes are marked seen when expanded, not when pushed: marking at
        # push time lets a node's consumer finish first when two paths of
        # different depth reach it, which breaks the topological order.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise ShapeError(
                        f"backward produced gradient shape {pg.shape} for parent shape {p.shape}"
                    )
                if pg.dtype != p.data.dtype:
                    raise ShapeError(
                        f"backward produced {pg.dtype} gradient for {p.data.dtype} parent"
                    )
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def make(data, parents, backward):
    """Wrap an op result, recording the graph edge when grad is enabled."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
