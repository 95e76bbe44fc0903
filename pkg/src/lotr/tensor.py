"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is row-major contiguous float64. Every operation that involves a
gradient-tracked tensor records its parents and a backward closure; calling
``backward()`` on a scalar root accumulates adjoints into all reachable
nodes. The graph is single-use per forward pass.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar root.

        Adjoints are accumulated into ``.grad`` of every node reachable
        through gradient-tracked parents. Deterministic: the traversal
        order depends only on graph structure.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar root, got shape {self.shape}")
        order = _toposort(self)
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root):
    """Post-order over gradient-tracked nodes; parents precede children."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            stack.append((parent, False))
    return order


def _make_op(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(tensor, grad):
    if tensor.requires_grad:
        tensor.grad += grad


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(og):
        _accum(a, og)
        _accum(b, og)

    return _make_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bw(og):
        _accum(a, og)
        _accum(b, -og)

    return _make_op(a.data - b.data, (a, b), bw)


def add_bias(x, b):
    """Add a vector along the last axis; the only broadcast we allow."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not match last axis of {x.shape}")

    def bw(og):
        _accum(x, og)
        _accum(b, og.reshape(-1, og.shape[-1]).sum(axis=0))

    return _make_op(x.data + b.data, (x, b), bw)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bw(og):
        _accum(a, og * b.data)
        _accum(b, og * a.data)

    return _make_op(a.data * b.data, (a, b), bw)


def scale(x, s):
    s = float(s)

    def bw(og):
        _accum(x, og * s)

    return _make_op(x.data * s, (x,), bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(og):
        _accum(a, og @ b.data.T)
        _accum(b, a.data.T @ og)

    return _make_op(a.data @ b.data, (a, b), bw)


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got shape {x.shape}")

    def bw(og):
        _accum(x, og.T)

    return _make_op(x.data.T, (x,), bw)


def reshape(x, shape):
    shape = tuple(shape)

    def bw(og):
        _accum(x, og.reshape(x.shape))

    return _make_op(x.data.reshape(shape), (x,), bw)


def relu(x):
    mask = x.data > 0

    def bw(og):
        _accum(x, og * mask)

    return _make_op(np.where(mask, x.data, 0.0), (x,), bw)


def softmax(x):
    """Softmax over the last axis with max-subtraction for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(og):
        inner = (og * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (og - inner))

    return _make_op(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each slice along the last axis to zero mean, unit variance."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} for feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = xhat * gain.data + bias.data

    def bw(og):
        _accum(gain, (og * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, og.reshape(-1, d).sum(axis=0))
        dxhat = og * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv_std * (dxhat - m1 - xhat * m2))

    return _make_op(y, (x, gain, bias), bw)


def sum_all(x):
    def bw(og):
        _accum(x, np.full_like(x.data, float(og.reshape(()))))

    return _make_op(np.asarray(x.data.sum()), (x,), bw)


def concat_cols(tensors):
    """Concatenate rank-2 tensors along the last axis."""
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch: {[t.shape for t in tensors]}")
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bw(og):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, og[:, lo:hi])

    return _make_op(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bw)


def finite_diff_check(f, x, step=1e-6):
    """Max relative error between the analytic gradient of ``f`` and
    central finite differences over every coordinate of ``x``.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per coordinate is
    |analytic - central| / max(1e-12, |central|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad.copy()

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        plus = flat.copy()
        plus[i] = orig + step
        minus = flat.copy()
        minus[i] = orig - step
        fp = f(Tensor(plus.reshape(x.shape))).item()
        fm = f(Tensor(minus.reshape(x.shape))).item()
        central = (fp - fm) / (2.0 * step)
        err = abs(analytic.reshape(-1)[i] - central) / max(1e-12, abs(central))
        worst = max(worst, err)
    return worst
