from . import kernels
from .ops import (
    BatchNormState,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    flip_horizontal,
    maxpool2d,
    mean,
    mul,
    relu,
    sigmoid,
    sum,
    upsample_nearest_2x,
)
from .tensor import ShapeError, Tape, Tensor, backward, current_tape, record, recording

__all__ = [
    "BatchNormState",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "batchnorm2d",
    "concat_channels",
    "conv2d",
    "current_tape",
    "flip_horizontal",
    "kernels",
    "maxpool2d",
    "mean",
    "mul",
    "record",
    "recording",
    "relu",
    "sigmoid",
    "sum",
    "upsample_nearest_2x",
]
