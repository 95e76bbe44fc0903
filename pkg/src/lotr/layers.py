"""Neural building blocks: linear maps, 2D convolution and its transpose,
dropout, and multi-head attention."""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, ShapeError, _make_op, _accum,
    add_bias, concat_cols, matmul, scale, softmax, transpose,
)


@dataclass
class MhaWeights:
    """Per-head query/key/value projections plus the output projection.

    Each head projects tokens of width ``dim`` down to ``dim // num_heads``.
    """
    wq: list          # per-head Tensor[dim x head_dim]
    wk: list
    wv: list
    wo: Tensor        # Tensor[dim x dim]
    num_heads: int

    def __post_init__(self):
        dim = self.wo.shape[0]
        if dim % self.num_heads != 0:
            raise ShapeError(f"token dim {dim} not divisible by {self.num_heads} heads")
        head_dim = dim // self.num_heads
        for group in (self.wq, self.wk, self.wv):
            if len(group) != self.num_heads:
                raise ShapeError(f"expected {self.num_heads} head projections, got {len(group)}")
            for w in group:
                if w.shape != (dim, head_dim):
                    raise ShapeError(f"head projection shape {w.shape}, expected {(dim, head_dim)}")
        if self.wo.shape != (dim, dim):
            raise ShapeError(f"output projection shape {self.wo.shape}, expected {(dim, dim)}")

    @property
    def dim(self):
        return self.wo.shape[0]

    @property
    def head_dim(self):
        return self.dim // self.num_heads


@dataclass
class ConvWeights:
    """Convolution kernel/bias with stride and zero padding.

    Kernel layout is out x in x kh x kw. For transposed convolution the
    first axis is the input channel count and the second the output.
    """
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got shape {self.kernel.shape}")
        if self.kernel.shape[2] < 1 or self.kernel.shape[3] < 1 or self.stride < 1:
            raise ShapeError("kernel spatial dims and stride must be >= 1")


def linear(x, w, b):
    """x @ w + b with the bias broadcast along the last axis."""
    return add_bias(matmul(x, w), b)


def multi_head_attention(q, k, v, weights):
    """Scaled dot-product attention over ``weights.num_heads`` heads.

    Per head: scores = (q wq)(k wk)^T / sqrt(head_dim), row-softmaxed and
    applied to v wv. Head outputs are concatenated and projected by wo.
    """
    if q.shape[-1] != weights.dim or k.shape[-1] != weights.dim or v.shape[-1] != weights.dim:
        raise ShapeError(
            f"attention token dims {q.shape}/{k.shape}/{v.shape} do not match weights dim {weights.dim}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    inv_sqrt = 1.0 / math.sqrt(weights.head_dim)
    heads = []
    for wq, wk, wv in zip(weights.wq, weights.wk, weights.wv):
        scores = scale(matmul(matmul(q, wq), transpose(matmul(k, wk))), inv_sqrt)
        heads.append(matmul(softmax(scores), matmul(v, wv)))
    return matmul(concat_cols(heads), weights.wo)


def attention_weights(q, k, weights):
    """Per-head softmax attention matrices, for inspection in tests."""
    inv_sqrt = 1.0 / math.sqrt(weights.head_dim)
    out = []
    for wq, wk in zip(weights.wq, weights.wk):
        scores = scale(matmul(matmul(q, wq), transpose(matmul(k, wk))), inv_sqrt)
        out.append(softmax(scores).data)
    return out


def _im2col(x, kh, kw, stride, padding):
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = np.empty((c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, oh * ow), oh, ow


def _col2im(cols, shape, kh, kw, stride, padding, oh, ow):
    c, h, w = shape
    padded = np.zeros((c, h + 2 * padding, w + 2 * padding))
    cols = cols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            padded[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, i, j]
    if padding:
        return padded[:, padding:-padding, padding:-padding]
    return padded


def conv2d(x, w):
    """Strided cross-correlation of a C x H x W input with ``w.kernel``."""
    out_c, in_c, kh, kw = w.kernel.shape
    if x.data.ndim != 3 or x.shape[0] != in_c:
        raise ShapeError(f"conv input shape {x.shape} does not match kernel {w.kernel.shape}")
    _, h, wd = x.shape
    if kh > h + 2 * w.padding or kw > wd + 2 * w.padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {w.padding})")
    if w.bias.shape != (out_c,):
        raise ShapeError(f"conv bias shape {w.bias.shape}, expected {(out_c,)}")

    cols, oh, ow = _im2col(x.data, kh, kw, w.stride, w.padding)
    kmat = w.kernel.data.reshape(out_c, -1)
    out = (kmat @ cols + w.bias.data[:, None]).reshape(out_c, oh, ow)

    def bw(og):
        og_flat = og.reshape(out_c, -1)
        _accum(w.kernel, (og_flat @ cols.T).reshape(w.kernel.shape))
        _accum(w.bias, og_flat.sum(axis=1))
        _accum(x, _col2im(kmat.T @ og_flat, x.shape, kh, kw, w.stride, w.padding, oh, ow))

    return _make_op(out, (x, w.kernel, w.bias), bw)


def deconv2d(x, w):
    """Transposed convolution; the adjoint of conv2d with the same kernel.

    Kernel layout is in x out x kh x kw. Requires a configuration that
    upsamples by exactly the stride (kh - 2*padding == stride).
    """
    in_c, out_c, kh, kw = w.kernel.shape
    if x.data.ndim != 3 or x.shape[0] != in_c:
        raise ShapeError(f"deconv input shape {x.shape} does not match kernel {w.kernel.shape}")
    if kh != kw or kh - 2 * w.padding != w.stride:
        raise ShapeError(
            f"deconv config kernel={kh}x{kw} stride={w.stride} pad={w.padding} "
            "does not upsample by an integer factor")
    if w.bias.shape != (out_c,):
        raise ShapeError(f"deconv bias shape {w.bias.shape}, expected {(out_c,)}")
    _, h, wd = x.shape
    s, p = w.stride, w.padding
    oh, ow = s * h, s * wd

    full = np.zeros((out_c, (h - 1) * s + kh, (wd - 1) * s + kw))
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + s * h:s, j:j + s * wd:s] += np.tensordot(
                w.kernel.data[:, :, i, j], x.data, axes=([0], [0]))
    out = full[:, p:p + oh, p:p + ow] + w.bias.data[:, None, None]

    def bw(og):
        og_pad = np.zeros_like(full)
        og_pad[:, p:p + oh, p:p + ow] = og
        dk = np.empty_like(w.kernel.data)
        dx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                window = og_pad[:, i:i + s * h:s, j:j + s * wd:s]
                dk[:, :, i, j] = np.tensordot(x.data, window, axes=([1, 2], [1, 2]))
                dx += np.tensordot(w.kernel.data[:, :, i, j], window, axes=([1], [0]))
        _accum(w.kernel, dk)
        _accum(w.bias, og.sum(axis=(1, 2)))
        _accum(x, dx)

    return _make_op(out, (x, w.kernel, w.bias), bw)


def dropout(x, rate, mode, rng_seed=0):
    """Zero elements with probability ``rate`` and rescale survivors.

    Eval mode is the identity. Deterministic for a fixed ``rng_seed``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    rng = np.random.Generator(np.random.Philox(key=rng_seed))
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(og):
        _accum(x, og * mask)

    return _make_op(x.data * mask, (x,), bw)
