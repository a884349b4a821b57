"""Small deterministic numerical engine: layers, layer stacks, Adam."""

from .adam import AdamState, adam_step
from .gradcheck import GradCheckReport, grad_check, relative_error
from .layers import (
    LAYER_KINDS,
    BatchNorm,
    Clip,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Layer,
    LeakyReLU,
    ReLU,
    Reshape,
    conv_out_size,
    conv_transpose_out_size,
)
from .stack import LayerStack, Tape


def forward(stack, x, mode="train", update_stats=True):
    return stack.forward(x, mode, update_stats=update_stats)


def backward(stack, tape, grad_out):
    return stack.backward(tape, grad_out)


__all__ = [
    "AdamState", "adam_step", "GradCheckReport", "grad_check", "relative_error",
    "LAYER_KINDS", "BatchNorm", "Clip", "Conv2d", "ConvTranspose2d", "Dense", "Layer",
    "LeakyReLU", "ReLU", "Reshape", "conv_out_size", "conv_transpose_out_size",
    "LayerStack", "Tape", "forward", "backward",
]
