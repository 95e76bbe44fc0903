"""Transformer-based direct landmark coordinate regression at desk scale,
with a verified autodiff core, the smooth-wing loss family, a heatmap
baseline, and training/evaluation tooling."""

from .tensor import Tensor, ShapeError, finite_diff_check
from .losses import LossSpec, elementwise_loss, total_loss
from .model import (LandmarkSet, ModelConfig, ModelParams, lotr_forward,
                    ffn_head_forward, flip_averaged_inference)
from .metrics import MetricsReport, evaluate, nme, norm_factor
from .training import TrainConfig, init_params, lamb_step, lr_at, train

__version__ = "0.1.0"
