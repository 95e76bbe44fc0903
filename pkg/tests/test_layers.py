import numpy as np
import pytest

from lotr.layers import (ConvWeights, MhaWeights, attention_weights, conv2d,
                         deconv2d, dropout, linear, multi_head_attention)
from lotr.tensor import ShapeError, Tensor, finite_diff_check, sum_all


def make_mha(rng, dim, heads):
    hd = dim // heads
    return MhaWeights(
        wq=[Tensor(rng.normal(size=(dim, hd))) for _ in range(heads)],
        wk=[Tensor(rng.normal(size=(dim, hd))) for _ in range(heads)],
        wv=[Tensor(rng.normal(size=(dim, hd))) for _ in range(heads)],
        wo=Tensor(rng.normal(size=(dim, dim))),
        num_heads=heads)


def naive_mha(q, k, v, w):
    """Straight-line single-loop reference for scaled dot-product attention."""
    head_dim = w.wo.shape[0] // w.num_heads
    heads = []
    for h in range(w.num_heads):
        qh = q @ w.wq[h].data
        kh = k @ w.wk[h].data
        vh = v @ w.wv[h].data
        scores = qh @ kh.T / np.sqrt(head_dim)
        scores -= scores.max(axis=1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=1, keepdims=True)
        heads.append(att @ vh)
    return np.concatenate(heads, axis=1) @ w.wo.data


def naive_conv(x, kernel, bias, stride, padding):
    """Six-loop cross-correlation reference."""
    out_c, in_c, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (x.shape[1] + 2 * padding - kh) // stride + 1
    ow = (x.shape[2] + 2 * padding - kw) // stride + 1
    out = np.zeros((out_c, oh, ow))
    for o in range(out_c):
        for i in range(in_c):
            for y in range(oh):
                for xx in range(ow):
                    for dy in range(kh):
                        for dx in range(kw):
                            out[o, y, xx] += kernel[o, i, dy, dx] * xp[i, y * stride + dy, xx * stride + dx]
    return out + bias[:, None, None]


def test_mha_matches_naive_reference():
    rng = np.random.Generator(np.random.Philox(key=20))
    w = make_mha(rng, 8, 2)
    q = rng.normal(size=(3, 8))
    k = rng.normal(size=(5, 8))
    v = rng.normal(size=(5, 8))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), w)
    assert np.abs(out.data - naive_mha(q, k, v, w)).max() <= 1e-12


def test_mha_single_key_ignores_query_values():
    rng = np.random.Generator(np.random.Philox(key=21))
    w = make_mha(rng, 8, 2)
    k = Tensor(rng.normal(size=(1, 8)))
    v = Tensor(rng.normal(size=(1, 8)))
    out1 = multi_head_attention(Tensor(rng.normal(size=(3, 8))), k, v, w)
    out2 = multi_head_attention(Tensor(rng.normal(size=(3, 8))), k, v, w)
    assert np.abs(out1.data - out2.data).max() <= 1e-12
    # every row attends to the single key with weight one
    assert np.abs(out1.data - out1.data[0]).max() <= 1e-12


def test_mha_identical_keys_average_values():
    rng = np.random.Generator(np.random.Philox(key=22))
    w = make_mha(rng, 8, 2)
    key = rng.normal(size=8)
    k = Tensor(np.stack([key, key]))
    v = rng.normal(size=(2, 8))
    q = Tensor(rng.normal(size=(1, 8)))
    for att in attention_weights(q, k, w):
        assert np.allclose(att, 0.5, atol=1e-12)
    out = multi_head_attention(q, k, Tensor(v), w)
    mean = multi_head_attention(q, k, Tensor(np.stack([v.mean(0), v.mean(0)])), w)
    assert np.abs(out.data - mean.data).max() <= 1e-12


def test_mha_attention_rows_are_convex_weights():
    rng = np.random.Generator(np.random.Philox(key=23))
    w = make_mha(rng, 8, 4)
    q = Tensor(rng.normal(size=(3, 8)))
    k = Tensor(rng.normal(size=(6, 8)))
    for att in attention_weights(q, k, w):
        assert (att >= 0).all()
        assert np.abs(att.sum(axis=1) - 1.0).max() <= 1e-12


def test_mha_key_value_permutation_equivariance():
    rng = np.random.Generator(np.random.Philox(key=24))
    w = make_mha(rng, 8, 2)
    q = Tensor(rng.normal(size=(3, 8)))
    k = rng.normal(size=(5, 8))
    v = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    out = multi_head_attention(q, Tensor(k), Tensor(v), w)
    out_p = multi_head_attention(q, Tensor(k[perm]), Tensor(v[perm]), w)
    assert np.abs(out.data - out_p.data).max() <= 1e-12


def test_mha_dim_mismatch_rejected():
    rng = np.random.Generator(np.random.Philox(key=25))
    w = make_mha(rng, 8, 2)
    with pytest.raises(ShapeError):
        multi_head_attention(Tensor(np.zeros((3, 6))), Tensor(np.zeros((5, 8))),
                             Tensor(np.zeros((5, 8))), w)


def test_conv2d_identity_1x1():
    x = np.random.Generator(np.random.Philox(key=26)).normal(size=(3, 4, 4))
    w = ConvWeights(kernel=Tensor(np.eye(3).reshape(3, 3, 1, 1)), bias=Tensor(np.zeros(3)))
    out = conv2d(Tensor(x), w)
    assert np.array_equal(out.data, x)


def test_conv2d_1x1_channel_reduction_shape():
    rng = np.random.Generator(np.random.Philox(key=27))
    x = Tensor(rng.normal(size=(1280, 6, 6)))
    w = ConvWeights(kernel=Tensor(rng.normal(size=(64, 1280, 1, 1)) * 0.01),
                    bias=Tensor(np.zeros(64)))
    assert conv2d(x, w).shape == (64, 6, 6)


def test_conv2d_matches_naive_reference():
    rng = np.random.Generator(np.random.Philox(key=28))
    x = rng.normal(size=(3, 7, 6))
    kernel = rng.normal(size=(4, 3, 3, 3))
    bias = rng.normal(size=4)
    for stride, padding in ((1, 0), (1, 1), (2, 1)):
        w = ConvWeights(kernel=Tensor(kernel), bias=Tensor(bias), stride=stride, padding=padding)
        out = conv2d(Tensor(x), w)
        ref = naive_conv(x, kernel, bias, stride, padding)
        assert out.shape == ref.shape
        assert np.abs(out.data - ref).max() <= 1e-12


def test_conv2d_kernel_too_large_rejected():
    w = ConvWeights(kernel=Tensor(np.zeros((1, 1, 5, 5))), bias=Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 3, 3))), w)


def test_conv2d_gradients_vs_finite_differences():
    rng = np.random.Generator(np.random.Philox(key=30))
    kernel = rng.normal(size=(2, 3, 3, 3))
    bias = rng.normal(size=2)
    x0 = rng.normal(size=(3, 5, 5))
    proj = rng.normal(size=(2, 3, 3))

    def f_input(t):
        w = ConvWeights(kernel=Tensor(kernel), bias=Tensor(bias), stride=2, padding=1)
        return sum_all(Tensor(proj) * conv2d(t, w))

    assert finite_diff_check(f_input, Tensor(x0)) <= 1e-6

    def f_kernel(t):
        w = ConvWeights(kernel=t, bias=Tensor(bias), stride=2, padding=1)
        return sum_all(Tensor(proj) * conv2d(Tensor(x0), w))

    assert finite_diff_check(f_kernel, Tensor(kernel)) <= 1e-6


def test_deconv2d_doubles_resolution_and_chains():
    rng = np.random.Generator(np.random.Philox(key=30))
    x = Tensor(rng.normal(size=(4, 6, 6)))
    w1 = ConvWeights(kernel=Tensor(rng.normal(size=(4, 3, 4, 4))), bias=Tensor(np.zeros(3)),
                     stride=2, padding=1)
    mid = deconv2d(x, w1)
    assert mid.shape == (3, 12, 12)
    w2 = ConvWeights(kernel=Tensor(rng.normal(size=(3, 2, 4, 4))), bias=Tensor(np.zeros(2)),
                     stride=2, padding=1)
    assert deconv2d(mid, w2).shape == (2, 24, 24)


def test_deconv2d_zero_input_gives_bias():
    bias = np.array([1.5, -2.0])
    w = ConvWeights(kernel=Tensor(np.ones((3, 2, 4, 4))), bias=Tensor(bias), stride=2, padding=1)
    out = deconv2d(Tensor(np.zeros((3, 4, 4))), w)
    assert np.array_equal(out.data, np.broadcast_to(bias[:, None, None], (2, 8, 8)))


def test_deconv2d_is_adjoint_of_conv2d():
    # <deconv(x), y> == <x, conv(y)> for zero bias and the same kernel
    rng = np.random.Generator(np.random.Philox(key=31))
    kernel = rng.normal(size=(3, 2, 4, 4))       # in x out for deconv
    x = rng.normal(size=(3, 5, 5))
    y = rng.normal(size=(2, 10, 10))
    up = deconv2d(Tensor(x), ConvWeights(kernel=Tensor(kernel), bias=Tensor(np.zeros(2)),
                                         stride=2, padding=1))
    # deconv's in x out layout doubles as the adjoint conv's out x in layout
    down = conv2d(Tensor(y), ConvWeights(kernel=Tensor(kernel),
                                         bias=Tensor(np.zeros(3)), stride=2, padding=1))
    lhs = float((up.data * y).sum())
    rhs = float((x * down.data).sum())
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_deconv2d_bad_config_rejected():
    w = ConvWeights(kernel=Tensor(np.zeros((2, 2, 3, 3))), bias=Tensor(np.zeros(2)),
                    stride=2, padding=1)
    with pytest.raises(ShapeError):
        deconv2d(Tensor(np.zeros((2, 4, 4))), w)


def test_deconv2d_gradient_vs_finite_differences():
    rng = np.random.Generator(np.random.Philox(key=32))
    kernel = rng.normal(size=(2, 3, 4, 4))
    bias = rng.normal(size=3)
    x0 = rng.normal(size=(2, 3, 3))
    proj = rng.normal(size=(3, 6, 6))

    def f(t):
        w = ConvWeights(kernel=Tensor(kernel), bias=Tensor(bias), stride=2, padding=1)
        return sum_all(Tensor(proj) * deconv2d(t, w))

    assert finite_diff_check(f, Tensor(x0)) <= 1e-6


def test_linear_bias_broadcast():
    x = Tensor(np.zeros((4, 3)))
    w = Tensor(np.zeros((3, 2)))
    b = Tensor([1.0, 2.0])
    assert np.array_equal(linear(x, w, b).data, np.tile([1.0, 2.0], (4, 1)))


def test_dropout_identity_paths():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    assert dropout(x, 0.0, "train") is x
    assert dropout(x, 0.1, "eval") is x


def test_dropout_rate_validation():
    x = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        dropout(x, 1.0, "train")
    with pytest.raises(ValueError):
        dropout(x, -0.1, "train")
    with pytest.raises(ValueError):
        dropout(x, 0.1, "test")


def test_dropout_statistics_and_determinism():
    x = Tensor(np.ones(100000))
    out = dropout(x, 0.1, "train", rng_seed=5).data
    survivors = (out != 0).mean()
    assert abs(survivors - 0.9) <= 0.01
    assert abs(out.mean() - 1.0) <= 0.02
    np.testing.assert_array_equal(out[out != 0], 1.0 / 0.9)
    again = dropout(x, 0.1, "train", rng_seed=5).data
    assert np.array_equal(out, again)
