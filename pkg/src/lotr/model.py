"""Landmark localization network: a small convolutional backbone, token
conversion, a transformer encoder/decoder with learned positional encoding
and landmark queries, and a per-token coordinate regression head.

Also provides the feed-forward-head baseline (no transformer) and
flip-averaged inference.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensor import Tensor, ShapeError, add, layer_norm, relu, reshape, scale, transpose
from .layers import ConvWeights, MhaWeights, conv2d, deconv2d, dropout, linear, multi_head_attention

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    image_size: int = 96
    backbone_channels: list = field(default_factory=lambda: [8, 16, 32, 32])
    reduction_channels: int = 16
    upsample_filters: list = field(default_factory=list)
    token_dim: int = 16
    num_layers: int = 2
    num_heads: int = 4
    num_landmarks: int = 10
    head_hidden: list = field(default_factory=lambda: [64, 64])
    ffn_hidden: list = field(default_factory=lambda: [64, 64])
    dropout_rate: float = 0.0
    dropout_per_sublayer: bool = False
    normalize_coords: bool = False

    def __post_init__(self):
        if self.token_dim % self.num_heads != 0:
            raise ValueError(f"token_dim {self.token_dim} not divisible by num_heads {self.num_heads}")
        if self.num_landmarks < 1 or self.num_layers < 1:
            raise ValueError("num_landmarks and num_layers must be >= 1")
        down = 2 ** len(self.backbone_channels)
        if self.image_size % down != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by backbone stride {down}")
        channels_in = self.upsample_filters[-1] if self.upsample_filters else self.reduction_channels
        if channels_in != self.token_dim:
            raise ValueError(
                f"channels entering the transformer ({channels_in}) must equal token_dim "
                f"({self.token_dim})")

    @property
    def backbone_map_size(self):
        return self.image_size // 2 ** len(self.backbone_channels)

    @property
    def feature_map_size(self):
        return self.backbone_map_size * 2 ** len(self.upsample_filters)

    @property
    def num_tokens(self):
        return self.feature_map_size ** 2

    @property
    def head_dim(self):
        return self.token_dim // self.num_heads

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "backbone_channels": list(self.backbone_channels),
            "reduction_channels": self.reduction_channels,
            "upsample_filters": list(self.upsample_filters),
            "token_dim": self.token_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "num_landmarks": self.num_landmarks,
            "head_hidden": list(self.head_hidden),
            "ffn_hidden": list(self.ffn_hidden),
            "dropout_rate": self.dropout_rate,
            "dropout_per_sublayer": self.dropout_per_sublayer,
            "normalize_coords": self.normalize_coords,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LandmarkSet:
    coords: np.ndarray  # N x 2 pixel coordinates (x, y)
    width: int
    height: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"landmark coords must be N x 2, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("landmark coordinates must be finite")


def _mha_specs(prefix, dim, heads):
    head_dim = dim // heads
    specs = []
    for h in range(heads):
        specs += [(f"{prefix}.q{h}", (dim, head_dim), "linear", dim),
                  (f"{prefix}.k{h}", (dim, head_dim), "linear", dim),
                  (f"{prefix}.v{h}", (dim, head_dim), "linear", dim)]
    specs.append((f"{prefix}.out", (dim, dim), "linear", dim))
    return specs


def _ln_specs(prefix, dim):
    return [(f"{prefix}.gain", (dim,), "gain", 0), (f"{prefix}.bias", (dim,), "bias", 0)]


def parameter_specs(config, include_ffn_head=False):
    """Ordered (name, shape, init_kind, fan_in) for every learnable tensor."""
    specs = []
    c_in = 3
    for i, c_out in enumerate(config.backbone_channels):
        specs.append((f"backbone.{i}.kernel", (c_out, c_in, 3, 3), "conv", c_in * 9))
        specs.append((f"backbone.{i}.bias", (c_out,), "bias", 0))
        c_in = c_out
    specs.append(("reduction.kernel", (config.reduction_channels, c_in, 1, 1), "conv", c_in))
    specs.append(("reduction.bias", (config.reduction_channels,), "bias", 0))
    c_in = config.reduction_channels
    for i, c_out in enumerate(config.upsample_filters):
        specs.append((f"upsample.{i}.kernel", (c_in, c_out, 4, 4), "conv", c_in * 16))
        specs.append((f"upsample.{i}.bias", (c_out,), "bias", 0))
        c_in = c_out

    d = config.token_dim
    specs.append(("pos_encoding", (config.num_tokens, d), "pos", 0))
    specs.append(("queries", (config.num_landmarks, d), "query", 0))
    for l in range(config.num_layers):
        specs += _mha_specs(f"enc.{l}.mha", d, config.num_heads)
        specs += _ln_specs(f"enc.{l}.ln1", d)
        specs.append((f"enc.{l}.ffn.w", (d, d), "linear", d))
        specs.append((f"enc.{l}.ffn.b", (d,), "bias", 0))
        specs += _ln_specs(f"enc.{l}.ln2", d)
    for l in range(config.num_layers):
        specs += _mha_specs(f"dec.{l}.self", d, config.num_heads)
        specs += _ln_specs(f"dec.{l}.ln1", d)
        specs += _mha_specs(f"dec.{l}.cross", d, config.num_heads)
        specs += _ln_specs(f"dec.{l}.ln2", d)
        specs.append((f"dec.{l}.ffn.w", (d, d), "linear", d))
        specs.append((f"dec.{l}.ffn.b", (d,), "bias", 0))
        specs += _ln_specs(f"dec.{l}.ln3", d)

    dims = [d] + list(config.head_hidden) + [2]
    for j in range(len(dims) - 1):
        specs.append((f"head.{j}.w", (dims[j], dims[j + 1]), "linear", dims[j]))
        specs.append((f"head.{j}.b", (dims[j + 1],), "bias", 0))

    if include_ffn_head:
        dims = [config.num_tokens * d] + list(config.ffn_hidden) + [2 * config.num_landmarks]
        for j in range(len(dims) - 1):
            specs.append((f"ffn_head.{j}.w", (dims[j], dims[j + 1]), "linear", dims[j]))
            specs.append((f"ffn_head.{j}.b", (dims[j + 1],), "bias", 0))
    return specs


class ModelParams:
    """Named collection of learnable tensors for one model configuration."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def named_arrays(self):
        return {name: t.data for name, t in self.tensors.items()}

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def mha(self, prefix, num_heads):
        return MhaWeights(
            wq=[self.tensors[f"{prefix}.q{h}"] for h in range(num_heads)],
            wk=[self.tensors[f"{prefix}.k{h}"] for h in range(num_heads)],
            wv=[self.tensors[f"{prefix}.v{h}"] for h in range(num_heads)],
            wo=self.tensors[f"{prefix}.out"],
            num_heads=num_heads,
        )

    def conv(self, prefix, stride=1, padding=0):
        return ConvWeights(kernel=self.tensors[f"{prefix}.kernel"],
                           bias=self.tensors[f"{prefix}.bias"],
                           stride=stride, padding=padding)


def backbone_forward(image, params, config):
    """Stack of stride-2 3x3 conv + ReLU blocks; 2x downsampling per block."""
    if image.shape != (3, config.image_size, config.image_size):
        raise ShapeError(f"image shape {image.shape}, expected (3, {config.image_size}, {config.image_size})")
    x = image
    for i in range(len(config.backbone_channels)):
        x = relu(conv2d(x, params.conv(f"backbone.{i}", stride=2, padding=1)))
    return x


def featmap_to_tokens(feat, reduction):
    """1x1 channel reduction then reshape to a row-major token sequence.

    Token i corresponds to pixel (i // W, i % W) of the feature map.
    """
    reduced = conv2d(feat, reduction)
    d = reduced.shape[0]
    return transpose(reshape(reduced, (d, reduced.shape[1] * reduced.shape[2])))


def _identity(x):
    return x


def encoder_layer(x, p, params, prefix, num_heads, drop=_identity):
    """Self-attention plus a single-linear-ReLU token map, each with a
    residual connection and layer normalization. The positional encoding is
    added to the attention query and key inputs only, never to the values."""
    qk = add(x, p)
    attn = drop(multi_head_attention(qk, qk, x, params.mha(f"{prefix}.mha", num_heads)))
    enc1 = layer_norm(add(attn, x), params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], LN_EPS)
    ffn = drop(relu(linear(enc1, params[f"{prefix}.ffn.w"], params[f"{prefix}.ffn.b"])))
    return layer_norm(add(ffn, enc1), params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], LN_EPS)


def decoder_layer(y, y0, x_enc, p, params, prefix, num_heads, drop=_identity):
    """Query self-attention, cross-attention into the encoded tokens, then
    the token-wise linear-ReLU map. The landmark-query embedding is the
    additive query/key term for self-attention and the query term for
    cross-attention; the positional encoding is the cross-attention key
    term. Values are taken raw in both."""
    q1 = add(y, y0)
    attn1 = drop(multi_head_attention(q1, q1, y, params.mha(f"{prefix}.self", num_heads)))
    dec1 = layer_norm(add(attn1, y), params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], LN_EPS)
    attn2 = drop(multi_head_attention(add(dec1, y0), add(x_enc, p), x_enc,
                                      params.mha(f"{prefix}.cross", num_heads)))
    dec2 = layer_norm(add(attn2, dec1), params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], LN_EPS)
    ffn = drop(relu(linear(dec2, params[f"{prefix}.ffn.w"], params[f"{prefix}.ffn.b"])))
    return layer_norm(add(ffn, dec2), params[f"{prefix}.ln3.gain"], params[f"{prefix}.ln3.bias"], LN_EPS)


def prediction_head(y, params, config, prefix="head"):
    """Token-wise MLP with ReLU hidden layers and a linear 2-wide output."""
    x = y
    n_hidden = len(config.head_hidden if prefix == "head" else config.ffn_hidden)
    for j in range(n_hidden):
        x = relu(linear(x, params[f"{prefix}.{j}.w"], params[f"{prefix}.{j}.b"]))
    return linear(x, params[f"{prefix}.{n_hidden}.w"], params[f"{prefix}.{n_hidden}.b"])


class _DropCtx:
    """Hands out deterministic per-call dropout applications in train mode."""

    def __init__(self, rate, mode, seed):
        self.rate = rate
        self.mode = mode
        self.seed = seed
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return dropout(x, self.rate, self.mode, rng_seed=(self.seed, self.calls))


def lotr_forward_tensor(image, params, config, mode="eval", dropout_seed=0):
    """Full forward pass returning the N x 2 coordinate tensor (with the
    gradient graph attached when parameters are gradient-tracked)."""
    feat = backbone_forward(image, params, config)
    if config.upsample_filters:
        x = conv2d(feat, params.conv("reduction"))
        for i in range(len(config.upsample_filters)):
            x = relu(deconv2d(x, params.conv(f"upsample.{i}", stride=2, padding=1)))
        d = x.shape[0]
        tokens = transpose(reshape(x, (d, x.shape[1] * x.shape[2])))
    else:
        tokens = featmap_to_tokens(feat, params.conv("reduction"))

    drop = _DropCtx(config.dropout_rate, mode, dropout_seed) if config.dropout_per_sublayer else _identity
    p = params["pos_encoding"]
    x = tokens
    for l in range(config.num_layers):
        x = encoder_layer(x, p, params, f"enc.{l}", config.num_heads, drop)
    y0 = params["queries"]
    y = y0
    for l in range(config.num_layers):
        y = decoder_layer(y, y0, x, p, params, f"dec.{l}", config.num_heads, drop)
    if not config.dropout_per_sublayer:
        y = dropout(y, config.dropout_rate, mode, rng_seed=(dropout_seed, 0))
    out = prediction_head(y, params, config)
    if config.normalize_coords:
        out = scale(out, float(config.image_size))
    return out


def lotr_forward(image, params, config, mode="eval", dropout_seed=0):
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=np.float64))
    coords = lotr_forward_tensor(image, params, config, mode, dropout_seed)
    return LandmarkSet(coords=coords.data.copy(), width=config.image_size, height=config.image_size)


def ffn_head_forward_tensor(image, params, config):
    """Baseline without the transformer: reduced feature map, flattened,
    regressed to N x 2 by a feed-forward stack."""
    feat = backbone_forward(image, params, config)
    tokens = featmap_to_tokens(feat, params.conv("reduction"))
    flat = reshape(tokens, (1, tokens.shape[0] * tokens.shape[1]))
    out = prediction_head(flat, params, config, prefix="ffn_head")
    out = reshape(out, (config.num_landmarks, 2))
    if config.normalize_coords:
        out = scale(out, float(config.image_size))
    return out


def ffn_head_forward(image, params, config):
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=np.float64))
    coords = ffn_head_forward_tensor(image, params, config)
    return LandmarkSet(coords=coords.data.copy(), width=config.image_size, height=config.image_size)


def validate_swap_map(swap_map, n):
    perm = np.asarray(swap_map, dtype=np.int64)
    if perm.shape != (n,) or sorted(perm.tolist()) != list(range(n)):
        raise ValueError(f"swap map must be a permutation of 0..{n - 1}")
    if not np.array_equal(perm[perm], np.arange(n)):
        raise ValueError("swap map must be involutive (its own inverse)")
    return perm


def flip_averaged_inference(image, params, config, swap_map, forward_fn=None):
    """Average predictions over the image and its horizontal mirror.

    The mirrored prediction is un-flipped (x -> width-1 - x, indices
    permuted by the left/right swap map) before averaging.
    """
    perm = validate_swap_map(swap_map, config.num_landmarks)
    if forward_fn is None:
        def forward_fn(img):
            return lotr_forward(img, params, config, mode="eval").coords
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    direct = np.asarray(forward_fn(arr), dtype=np.float64)
    mirrored = np.ascontiguousarray(arr[:, :, ::-1])
    flipped = np.asarray(forward_fn(mirrored), dtype=np.float64).copy()
    flipped[:, 0] = (config.image_size - 1) - flipped[:, 0]
    flipped = flipped[perm]
    return LandmarkSet(coords=0.5 * (direct + flipped),
                       width=config.image_size, height=config.image_size)


def parameter_count(config, which="lotr"):
    include_ffn = which == "ffn"
    total = 0
    for name, shape, _, _ in parameter_specs(config, include_ffn_head=include_ffn):
        if which == "lotr" and name.startswith("ffn_head."):
            continue
        if which == "ffn" and (name.startswith(("enc.", "dec.", "head.")) or
                               name in ("pos_encoding", "queries")):
            continue
        total += int(np.prod(shape))
    return total


def attention_mac_counts(config):
    """Exact multiply-accumulate counts for the attention score/apply stages.

    Encoder self-attention cost scales with the square of the token count;
    decoder cross-attention scales linearly in both token and landmark
    counts.
    """
    t, n, d, layers = config.num_tokens, config.num_landmarks, config.token_dim, config.num_layers
    per_enc_self = 2 * t * t * d          # QK^T plus attention-times-V, all heads
    per_dec_self = 2 * n * n * d
    per_dec_cross = 2 * n * t * d
    return {
        "encoder_self_attention": layers * per_enc_self,
        "decoder_self_attention": layers * per_dec_self,
        "decoder_cross_attention": layers * per_dec_cross,
        "encoder_score_entries": t * t,
        "decoder_cross_score_entries": n * t,
        "total": layers * (per_enc_self + per_dec_self + per_dec_cross),
    }


def save_checkpoint(path, params, config, extra=None):
    """Write parameters (plus optional extra arrays such as optimizer state)
    to the binary container with a JSON config sidecar."""
    arrays = dict(params.named_arrays())
    if extra:
        arrays.update(extra)
    container.write_tensors(path, arrays)
    with open(str(path) + ".json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, ModelConfig, extra arrays)."""
    arrays = container.read_tensors(path)
    with open(str(path) + ".json") as fh:
        config = ModelConfig.from_dict(json.load(fh))
    known = {name for name, _, _, _ in parameter_specs(config, include_ffn_head=True)}
    tensors = {}
    extra = {}
    for name, arr in arrays.items():
        if name in known:
            tensors[name] = Tensor(arr, requires_grad=True)
        else:
            extra[name] = arr
    return ModelParams(tensors), config, extra
