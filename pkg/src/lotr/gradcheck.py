"""Finite-difference verification of every differentiable component.

Each check scalarizes an operation with a fixed random projection and
compares the analytic gradient against central differences. The optional
``corrupt`` hook offsets one component's analytic gradient so the harness
can prove it detects bad gradients.
"""

import zlib

import numpy as np

from .tensor import Tensor, layer_norm, matmul, mul, relu, softmax, sum_all
from .layers import ConvWeights, MhaWeights, conv2d, deconv2d, multi_head_attention
from .losses import LossSpec, total_loss
from .model import ModelConfig, decoder_layer, encoder_layer, lotr_forward_tensor, prediction_head
from .training import init_params

E2E_CONFIG = ModelConfig(
    image_size=16, backbone_channels=[4, 8], reduction_channels=8,
    token_dim=8, num_layers=1, num_heads=2, num_landmarks=3,
    head_hidden=[8], ffn_hidden=[8], dropout_rate=0.0)

_LAYER_CONFIG = ModelConfig(
    image_size=96, reduction_channels=16, token_dim=16, num_layers=1,
    num_heads=2, num_landmarks=5, head_hidden=[8], dropout_rate=0.0)


def _fd_err(f, x, step=1e-5, grad_offset=0.0):
    """Max relative error of the analytic gradient vs finite differences,
    optionally offsetting the analytic gradient (corruption hook).

    Uses Richardson extrapolation of central differences at ``step`` and
    ``step / 2``: the O(step^2) truncation term cancels, so a larger step
    can be used, which keeps cancellation roundoff (~eps * |f| / step) well
    below coordinates whose true gradient is small."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    f(probe).backward()
    analytic = probe.grad.reshape(-1) + grad_offset
    flat = x.data.reshape(-1)

    def central(i, h):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = f(Tensor(plus.reshape(x.shape))).item()
        fm = f(Tensor(minus.reshape(x.shape))).item()
        return (fp - fm) / (2.0 * h)

    worst = 0.0
    for i in range(flat.size):
        estimate = (4.0 * central(i, step / 2.0) - central(i, step)) / 3.0
        worst = max(worst, abs(analytic[i] - estimate) / max(1e-12, abs(estimate)))
    return worst


def _projector(rng, shape):
    proj = Tensor(rng.normal(size=shape))
    return lambda out: sum_all(mul(out, proj))


def _rng_for(seed, name, point):
    return np.random.Generator(np.random.Philox(
        key=((seed << 32) ^ zlib.crc32(name.encode()), point)))


def _mha_weights(rng, dim, heads):
    hd = dim // heads
    return MhaWeights(
        wq=[Tensor(rng.normal(size=(dim, hd))) for _ in range(heads)],
        wk=[Tensor(rng.normal(size=(dim, hd))) for _ in range(heads)],
        wv=[Tensor(rng.normal(size=(dim, hd))) for _ in range(heads)],
        wo=Tensor(rng.normal(size=(dim, dim))),
        num_heads=heads)


def _frozen_params(rng):
    params = init_params(_LAYER_CONFIG, seed=int(rng.integers(1 << 30)))
    for t in params.tensors.values():
        t.requires_grad = False
    return params


def _case_matmul(rng):
    b = Tensor(rng.normal(size=(4, 3)))
    proj = _projector(rng, (3, 3))
    return (lambda t: proj(matmul(t, b))), Tensor(rng.normal(size=(3, 4)))


def _case_relu(rng):
    proj = _projector(rng, (4, 5))
    return (lambda t: proj(relu(t))), Tensor(rng.normal(size=(4, 5)) + 0.3)


def _case_softmax(rng):
    proj = _projector(rng, (3, 6))
    return (lambda t: proj(softmax(t))), Tensor(rng.normal(size=(3, 6)))


def _case_layer_norm(rng):
    gain = Tensor(rng.normal(size=(8,)))
    bias = Tensor(rng.normal(size=(8,)))
    proj = _projector(rng, (4, 8))
    return (lambda t: proj(layer_norm(t, gain, bias))), Tensor(rng.normal(size=(4, 8)))


def _case_mha(rng):
    w = _mha_weights(rng, 8, 2)
    k = Tensor(rng.normal(size=(5, 8)))
    v = Tensor(rng.normal(size=(5, 8)))
    proj = _projector(rng, (3, 8))
    return (lambda t: proj(multi_head_attention(t, k, v, w))), Tensor(rng.normal(size=(3, 8)))


def _case_conv2d(rng):
    w = ConvWeights(kernel=Tensor(rng.normal(size=(3, 2, 3, 3))),
                    bias=Tensor(rng.normal(size=(3,))), stride=2, padding=1)
    proj = _projector(rng, (3, 3, 3))
    return (lambda t: proj(conv2d(t, w))), Tensor(rng.normal(size=(2, 6, 6)))


def _case_conv2d_kernel(rng):
    x = Tensor(rng.normal(size=(2, 6, 6)))
    bias = Tensor(rng.normal(size=(3,)))
    proj = _projector(rng, (3, 6, 6))
    return (lambda t: proj(conv2d(x, ConvWeights(t, bias, stride=1, padding=1)))), \
        Tensor(rng.normal(size=(3, 2, 3, 3)))


def _case_deconv2d(rng):
    w = ConvWeights(kernel=Tensor(rng.normal(size=(2, 3, 4, 4))),
                    bias=Tensor(rng.normal(size=(3,))), stride=2, padding=1)
    proj = _projector(rng, (3, 8, 8))
    return (lambda t: proj(deconv2d(t, w))), Tensor(rng.normal(size=(2, 4, 4)))


def _case_deconv2d_kernel(rng):
    x = Tensor(rng.normal(size=(2, 4, 4)))
    bias = Tensor(rng.normal(size=(3,)))
    proj = _projector(rng, (3, 8, 8))
    return (lambda t: proj(deconv2d(x, ConvWeights(t, bias, stride=2, padding=1)))), \
        Tensor(rng.normal(size=(2, 3, 4, 4)))


def _case_encoder_layer(rng):
    params = _frozen_params(rng)
    p = Tensor(rng.normal(size=(6, 16)))
    proj = _projector(rng, (6, 16))
    return (lambda t: proj(encoder_layer(t, p, params, "enc.0", 2))), \
        Tensor(rng.normal(size=(6, 16)))


def _case_decoder_layer(rng):
    params = _frozen_params(rng)
    y0 = Tensor(rng.normal(size=(5, 16)))
    x_enc = Tensor(rng.normal(size=(6, 16)))
    p = Tensor(rng.normal(size=(6, 16)))
    proj = _projector(rng, (5, 16))
    return (lambda t: proj(decoder_layer(t, y0, x_enc, p, params, "dec.0", 2))), \
        Tensor(rng.normal(size=(5, 16)))


def _case_prediction_head(rng):
    params = _frozen_params(rng)
    proj = _projector(rng, (5, 2))
    return (lambda t: proj(prediction_head(t, params, _LAYER_CONFIG))), \
        Tensor(rng.normal(size=(5, 16)))


_LAYER_CASES = {
    "matmul": _case_matmul,
    "relu": _case_relu,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "multi_head_attention": _case_mha,
    "conv2d": _case_conv2d,
    "conv2d_kernel": _case_conv2d_kernel,
    "deconv2d": _case_deconv2d,
    "deconv2d_kernel": _case_deconv2d_kernel,
    "encoder_layer": _case_encoder_layer,
    "decoder_layer": _case_decoder_layer,
    "prediction_head": _case_prediction_head,
}


def layer_checks(seed=0, points=10, corrupt=None):
    """Worst finite-difference relative error per layer operation, over
    ``points`` independent random cases each."""
    results = {}
    for name, make_case in _LAYER_CASES.items():
        worst = 0.0
        for point in range(points):
            f, x = make_case(_rng_for(seed, name, point))
            offset = 0.01 if corrupt == name else 0.0
            worst = max(worst, _fd_err(f, x, grad_offset=offset))
        results[name] = worst
    return results


def loss_checks(seed=0, points=10, corrupt=None):
    """Finite-difference check of every loss kind, away from kink points."""
    results = {}
    for kind in ("l1", "l2", "smooth-l1", "wing", "smooth-wing"):
        spec = LossSpec(kind=kind)
        kinks = np.array([0.0, spec.t, 1.0, spec.w])
        rng = _rng_for(seed, f"loss:{kind}", 0)
        worst = 0.0
        for _ in range(points):
            while True:
                x = rng.uniform(-15.0, 15.0, size=(4, 2))
                if (np.abs(np.abs(x)[..., None] - kinks) > 1e-3).all():
                    break
            offset = 0.01 if corrupt == f"loss:{kind}" else 0.0
            worst = max(worst, _fd_err(
                lambda t: total_loss(np.zeros((4, 2)), t, spec), Tensor(x),
                grad_offset=offset))
        results[f"loss:{kind}"] = worst
    return results


def end_to_end_check(seed=0, corrupt=None):
    """Finite-difference check of the full forward + loss over every
    parameter tensor of a 16x16-input micro model."""
    cfg = E2E_CONFIG
    rng = np.random.Generator(np.random.Philox(key=(seed, 99)))
    params = init_params(cfg, seed=seed)
    # check at a generic point: the trained-model query scale, not the
    # deliberately tiny init, so no gradient sits below FD resolution
    params.tensors["queries"] = Tensor(rng.normal(size=(cfg.num_landmarks, cfg.token_dim)))
    for t in params.tensors.values():
        t.requires_grad = False
    image = Tensor(rng.random((3, cfg.image_size, cfg.image_size)))
    target = rng.uniform(3.0, 8.0, size=(cfg.num_landmarks, 2))
    spec = LossSpec()

    worst = 0.0
    for name in params.names():
        def f(t, name=name):
            saved = params.tensors[name]
            params.tensors[name] = t
            try:
                pred = lotr_forward_tensor(image, params, cfg, mode="eval")
                return total_loss(target, pred, spec)
            finally:
                params.tensors[name] = saved
        offset = 0.01 if corrupt == "end_to_end" else 0.0
        worst = max(worst, _fd_err(f, params[name], grad_offset=offset))
    return {"end_to_end": worst}


def full_suite(seed=0, points=10, corrupt=None, include_e2e=True):
    results = {}
    results.update(layer_checks(seed, points, corrupt))
    results.update(loss_checks(seed, points, corrupt))
    if include_e2e:
        results.update(end_to_end_check(seed, corrupt))
    return results
