"""Robust regression losses for coordinate errors.

Implements L1, L2 (0.5 x^2), smooth-L1, the wing loss, and the smooth-wing
variant that adds a quadratic inner region below a threshold ``t`` with
constants chosen to keep the gradient continuous at both thresholds.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import _make_op, _accum, ShapeError

KINDS = ("l1", "l2", "smooth-l1", "wing", "smooth-wing")


@dataclass
class LossSpec:
    """Loss kind plus parameters.

    ``w`` is the outer threshold where the loss turns linear, ``epsilon``
    controls the steepness of the logarithmic region, and ``t`` (smooth-wing
    only) bounds the inner quadratic region, 0 < t < w.
    """
    kind: str = "smooth-wing"
    w: float = 10.0
    epsilon: float = 2.0
    t: float = 0.01

    # derived constants, cached at construction
    c: float = field(init=False, repr=False, default=0.0)
    s: float = field(init=False, repr=False, default=0.0)
    c1: float = field(init=False, repr=False, default=0.0)
    c2: float = field(init=False, repr=False, default=0.0)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {KINDS}")
        if self.w <= 0 or self.epsilon <= 0:
            raise ValueError(f"loss parameters must be positive: w={self.w}, epsilon={self.epsilon}")
        if self.kind == "smooth-wing" and not 0.0 < self.t < self.w:
            raise ValueError(f"inner threshold t={self.t} must satisfy 0 < t < w={self.w}")
        self.c = self.w - self.w * math.log(1.0 + self.w / self.epsilon)
        self.s = (self.w + self.epsilon) / (2.0 * self.t * (self.epsilon + self.t))
        self.c1 = self.w - (self.w + self.epsilon) * math.log(1.0 + self.w / self.epsilon)
        self.c2 = self.s * self.t * self.t

    def to_dict(self):
        return {"kind": self.kind, "w": self.w, "epsilon": self.epsilon, "t": self.t}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], w=d.get("w", 10.0), epsilon=d.get("epsilon", 2.0),
                   t=d.get("t", 0.01))


def loss_value_grad(x, spec):
    """Vectorized loss value and analytic gradient for an error array.

    At an exact branch boundary the gradient of the inner (smaller |x|)
    branch is used; the value follows the piecewise definition as written.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    sgn = np.sign(x)
    w, eps, kind = spec.w, spec.epsilon, spec.kind

    if kind == "l1":
        return a, sgn
    if kind == "l2":
        return 0.5 * x * x, x.copy()
    if kind == "smooth-l1":
        value = np.where(a < 1.0, 0.5 * x * x, a - 0.5)
        grad = np.where(a <= 1.0, x, sgn)
        return value, grad
    if kind == "wing":
        value = np.where(a < w, w * np.log1p(a / eps), a - spec.c)
        grad = np.where(a <= w, sgn * w / (eps + a), sgn)
        return value, grad
    # smooth-wing
    t, s, c1, c2 = spec.t, spec.s, spec.c1, spec.c2
    value = np.where(a < t, s * x * x,
                     np.where(a > w, a - c1 - c2,
                              (w + eps) * np.log1p(a / eps) - c2))
    grad = np.where(a <= t, 2.0 * s * x,
                    np.where(a <= w, sgn * (w + eps) / (eps + a), sgn))
    return value, grad


def elementwise_loss(x, spec):
    """Scalar loss value and gradient at a single error ``x``."""
    value, grad = loss_value_grad(np.asarray(float(x)), spec)
    return float(value), float(grad)


def total_loss(target, pred, spec):
    """Sum of the elementwise loss over every landmark coordinate error.

    ``target`` is an N x 2 array of ground-truth coordinates and ``pred`` a
    Tensor of the same shape; differentiable with respect to ``pred``.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"loss shape mismatch: target {target.shape} vs prediction {pred.shape}")
    value, grad = loss_value_grad(target - pred.data, spec)

    def bw(og):
        _accum(pred, -float(og.reshape(())) * grad)

    return _make_op(np.asarray(value.sum()), (pred,), bw)
