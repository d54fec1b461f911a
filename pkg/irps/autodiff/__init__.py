"""
Reverse-mode automatic differentiation for the inverse-rendering network
"""

from .check import gradcheck
from .ops import (
    add,
    broadcast_batch,
    channel_norm,
    concat_channels,
    conv2d_1x1,
    conv2d_3x3,
    hadamard,
    l2_normalize_channels,
    light_shading,
    linear_operator,
    lrelu,
    masked_mean_abs,
    masked_mean_sqnorm,
    relu,
    scalar_mul,
    specular_guide,
    sub,
    sum_all,
)
from .optim import Adam, AdamState, adam_step
from .tape import Tape, Tensor, backward, current_tape

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "current_tape",
    "gradcheck",
    "Adam",
    "AdamState",
    "adam_step",
    "add",
    "sub",
    "hadamard",
    "scalar_mul",
    "relu",
    "lrelu",
    "conv2d_3x3",
    "conv2d_1x1",
    "channel_norm",
    "l2_normalize_channels",
    "concat_channels",
    "broadcast_batch",
    "light_shading",
    "specular_guide",
    "linear_operator",
    "sum_all",
    "masked_mean_abs",
    "masked_mean_sqnorm",
]
