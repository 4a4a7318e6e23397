from .core import Gradients, KinkMonitor, Tape, Tensor, backward, grad_enabled
from .gradcheck import GradCheckResult, grad_check
from .ops import (
    RunningStats,
    activation,
    concat,
    concat_channels,
    conv2d,
    depthwise_conv2d,
    normalize,
    pointwise_conv,
    pool2d,
    resize_bilinear,
    split,
    split_channels,
)

__all__ = [
    "Gradients", "KinkMonitor", "Tape", "Tensor", "backward", "grad_enabled",
    "GradCheckResult", "grad_check", "RunningStats", "activation", "concat",
    "concat_channels", "conv2d", "depthwise_conv2d", "normalize", "pointwise_conv",
    "pool2d", "resize_bilinear", "split", "split_channels",
]
