"""Parameter initialization, the LAMB optimizer with layer-wise trust
ratios, the step learning-rate schedule, and the training loop."""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, scale
from .losses import LossSpec, total_loss
from .metrics import nme
from .model import (ModelParams, lotr_forward_tensor, parameter_specs,
                    save_checkpoint)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 1e-3
    lr_drop_epochs: list = field(default_factory=lambda: [50, 75])
    lr_drop_factor: float = 0.1
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    checkpoint_every: int = 0   # steps; 0 disables periodic checkpoints
    max_steps: int = 0          # 0 = no step cap
    grad_clip_norm: float = 0.0  # 0 disables clipping
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    trust_clamp: float = 10.0
    query_init_std: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        drops = list(self.lr_drop_epochs)
        if drops != sorted(set(drops)):
            raise ValueError("lr_drop_epochs must be strictly increasing")

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "epochs", "batch_size", "base_lr", "lr_drop_epochs", "lr_drop_factor",
            "seed", "checkpoint_every", "max_steps", "grad_clip_norm",
            "beta1", "beta2", "eps", "weight_decay", "trust_clamp",
            "query_init_std")}
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossSpec.from_dict(d["loss"])
        return cls(**d)


class OptimizerState:
    """Per-parameter first/second moments plus the shared step count."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
        self.step = 0

    def to_arrays(self):
        out = {"opt.step": np.asarray(float(self.step))}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, params, arrays):
        state = cls(params)
        state.step = int(float(arrays["opt.step"]))
        for name in state.m:
            state.m[name] = np.asarray(arrays[f"opt.m.{name}"], dtype=np.float64)
            state.v[name] = np.asarray(arrays[f"opt.v.{name}"], dtype=np.float64)
        return state


def init_params(config, seed=0, include_ffn_head=False, query_std=1e-4):
    """He-normal weights, zero biases, unit gains; the positional encoding
    is standard normal and the landmark queries are normal with std 1e-4.

    ``query_std`` can be raised when training the whole model from scratch:
    the near-zero default makes the queries nearly indistinguishable, and an
    optimizer whose step size is relative to the parameter norm can leave
    them degenerate (every landmark decoded identically) for a long time.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    tensors = {}
    for name, shape, kind, fan_in in parameter_specs(config, include_ffn_head=include_ffn_head):
        if kind in ("conv", "linear"):
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif kind == "bias":
            data = np.zeros(shape)
        elif kind == "gain":
            data = np.ones(shape)
        elif kind == "pos":
            data = rng.normal(0.0, 1.0, size=shape)
        elif kind == "query":
            data = rng.normal(0.0, query_std, size=shape)
        else:
            raise ValueError(f"unknown init kind {kind}")
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


def lamb_step(params, grads, state, lr, config=None, **hyper):
    """One LAMB update: Adam-style bias-corrected moments scaled per tensor
    by the trust ratio ||param|| / ||update|| (clamped, 1 on zero norms)."""
    if config is not None:
        hyper = {"beta1": config.beta1, "beta2": config.beta2, "eps": config.eps,
                 "weight_decay": config.weight_decay, "trust_clamp": config.trust_clamp}
    b1 = hyper.get("beta1", 0.9)
    b2 = hyper.get("beta2", 0.999)
    eps = hyper.get("eps", 1e-6)
    wd = hyper.get("weight_decay", 0.0)
    clamp = hyper.get("trust_clamp", 10.0)

    state.step += 1
    t = state.step
    for name, tensor in params.tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if wd:
            update = update + wd * tensor.data
        p_norm = float(np.linalg.norm(tensor.data))
        u_norm = float(np.linalg.norm(update))
        if p_norm == 0.0 or u_norm == 0.0:
            trust = 1.0
        else:
            trust = min(max(p_norm / u_norm, 0.0), clamp)
        tensor.data = tensor.data - lr * trust * update


def lr_at(epoch, config):
    """Piecewise-constant schedule: multiply by the drop factor at each
    configured drop epoch."""
    drops = sum(1 for e in config.lr_drop_epochs if epoch >= e)
    return config.base_lr * config.lr_drop_factor ** drops


def _mix_seed(*parts):
    """Deterministic 64-bit mix of integer parts (for per-step dropout keys)."""
    h = np.uint64(0x9E3779B97F4A7C15)
    for p in parts:
        h = np.uint64((int(h) ^ int(p)) * 0xBF58476D1CE4E5B9 % (1 << 64))
    return int(h)


class TrainAbort(RuntimeError):
    pass


def train(samples, model_config, train_config, params=None, state=None,
          start_step=0, out_dir=None, log_fn=None, val_samples=None):
    """Seeded mini-batch training loop.

    Forward -> batch-mean loss -> backward -> LAMB step. Logs per-epoch
    loss and validation NME (image-size normalization), checkpoints at the
    configured cadence, and is deterministic under a fixed seed. Returns
    (params, state, log records).
    """
    if not samples:
        raise ValueError("empty training set")
    if params is None:
        params = init_params(model_config, seed=train_config.seed,
                             query_std=train_config.query_init_std)
    if state is None:
        state = OptimizerState(params)
    val = val_samples if val_samples is not None else samples
    d_norm = math.sqrt(model_config.image_size ** 2)
    names = params.names()
    n = len(samples)
    steps_per_epoch = (n + train_config.batch_size - 1) // train_config.batch_size
    log = []
    step = start_step

    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "train.jsonl"), "a")

    try:
        for epoch in range(step // steps_per_epoch, train_config.epochs):
            order = np.random.Generator(
                np.random.Philox(key=(train_config.seed, epoch))).permutation(n)
            lr = lr_at(epoch, train_config)
            epoch_losses = []
            for b in range(step % steps_per_epoch, steps_per_epoch):
                idx = order[b * train_config.batch_size:(b + 1) * train_config.batch_size]
                params.zero_grads()
                batch_loss = None
                for i in idx:
                    s = samples[i]
                    pred = lotr_forward_tensor(
                        Tensor(s.image), params, model_config, mode="train",
                        dropout_seed=_mix_seed(train_config.seed, step, int(i)))
                    term = total_loss(s.landmarks, pred, train_config.loss)
                    batch_loss = term if batch_loss is None else batch_loss + term
                batch_loss = scale(batch_loss, 1.0 / len(idx))
                loss_val = batch_loss.item()
                if not math.isfinite(loss_val):
                    raise TrainAbort(f"non-finite loss at step {step} (batch {b} of epoch {epoch})")
                batch_loss.backward()
                grads = {}
                for name in names:
                    g = params[name].grad
                    grads[name] = g if g is not None else np.zeros_like(params[name].data)
                if train_config.grad_clip_norm > 0:
                    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                    if norm > train_config.grad_clip_norm:
                        factor = train_config.grad_clip_norm / norm
                        grads = {k: g * factor for k, g in grads.items()}
                lamb_step(params, grads, state, lr, config=train_config)
                step += 1
                epoch_losses.append(loss_val)
                record = {"epoch": epoch, "step": step, "loss": loss_val, "lr": lr}
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                if train_config.checkpoint_every and out_dir and step % train_config.checkpoint_every == 0:
                    save_checkpoint(os.path.join(out_dir, f"ckpt-{step}.lotr"),
                                    params, model_config, extra=state.to_arrays())
                if train_config.max_steps and step >= train_config.max_steps:
                    break
            val_nme = mean_nme(val, params, model_config, d_norm)
            summary = {"epoch": epoch, "step": step,
                       "loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                       "lr": lr, "val_nme": val_nme}
            log.append(summary)
            if log_file:
                log_file.write(json.dumps(summary) + "\n")
            if log_fn:
                log_fn(summary)
            if train_config.max_steps and step >= train_config.max_steps:
                break
    finally:
        if log_file:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "ckpt-final.lotr"),
                        params, model_config, extra=state.to_arrays())
    return params, state, log


def mean_nme(samples, params, model_config, d_norm=None):
    """Mean per-image NME of eval-mode predictions over ``samples``."""
    if d_norm is None:
        d_norm = float(model_config.image_size)
    errs = []
    for s in samples:
        pred = lotr_forward_tensor(Tensor(s.image), params, model_config, mode="eval")
        errs.append(nme(s.landmarks, pred.data, d_norm))
    return float(np.mean(errs))
