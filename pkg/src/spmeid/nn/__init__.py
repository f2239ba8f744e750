"""Reverse-mode autodiff engine and transformer-encoder building blocks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (ENCODER_PRESETS, Encoder, EncoderConfig, Linear, Module,
                     causal_mask, encoder_param_count, sinusoidal_encoding)
from .optim import Adam, CosineSchedule, batch_fingerprint, train_step, weight_checksum
from .tensor import Tensor, concat, mse, softmax

__all__ = [
    "Adam", "CosineSchedule", "Encoder", "EncoderConfig", "ENCODER_PRESETS",
    "Linear", "Module", "Tensor", "batch_fingerprint", "causal_mask", "concat",
    "encoder_param_count", "load_checkpoint", "mse", "save_checkpoint",
    "sinusoidal_encoding", "softmax", "train_step", "weight_checksum",
]
