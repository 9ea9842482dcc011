"""Surgical phase recognition with a fused two-branch multi-stage causal TCN."""

from .model import ModelConfig, TemporalMode, init_model, parameter_count, full_scale_config, receptive_field
from .losses import LossKind, LossSpec
from .optim import TrainConfig, train

__version__ = "0.1.0"
