"""Fisheye outpainting + segmentation beyond the circular field of view."""

from .geometry import CircularMask, DistortionModel, circular_mask, warp_image
from .metrics import ConfusionMatrix, miou, psnr, ssim
from .model import ModelConfig, Sample, forward, load_weights, save_weights
from .model import train_toy
from .polar import PolarMaskSet, generate_polar_masks, pca_forward
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "CircularMask", "ConfusionMatrix", "DistortionModel", "ModelConfig",
    "PolarMaskSet", "Sample", "Tape", "Tensor", "circular_mask", "forward",
    "generate_polar_masks", "grad_check", "load_weights", "miou",
    "pca_forward", "psnr", "save_weights", "ssim", "train_toy", "warp_image",
]
