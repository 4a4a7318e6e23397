"""MambaU-Lite: a lightweight Mamba/CNN hybrid for binary skin-lesion segmentation,
implemented on a small NumPy reverse-mode autodiff engine."""

from .checkpoint import load_checkpoint, memory_size, save_checkpoint
from .config import ModelConfig
from .losses import LossConfig, MaskPair, composite_loss, dice_loss, dsc_metric, iou_metric, tversky_loss
from .model import MambaULite, build, flops_estimate, param_count, shape_plan
from .train import Adam, PlateauScheduler, TrainSchedule, fit

__all__ = [
    "load_checkpoint", "memory_size", "save_checkpoint", "ModelConfig", "LossConfig", "MaskPair",
    "composite_loss", "dice_loss", "dsc_metric", "iou_metric", "tversky_loss", "MambaULite",
    "build", "flops_estimate", "param_count", "shape_plan", "Adam", "PlateauScheduler",
    "TrainSchedule", "fit",
]
