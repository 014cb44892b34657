"""ECNDNet: dilated residual CNN for Gaussian image denoising, in numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import NoiseConfig, PatchSet, add_gaussian_noise, build_patch_set, load_image, save_image
from .evaluation import benchmark_runtime, evaluate_set, psnr
from .network import ArchitectureSpec, Model, Variant, build_variant, denoise, param_count, receptive_fields
from .training import AdamState, TrainConfig, adam_step, lr_at_epoch, residual_loss, train_epoch

__all__ = [
    "AdamState", "ArchitectureSpec", "Model", "NoiseConfig", "PatchSet", "TrainConfig", "Variant",
    "adam_step", "add_gaussian_noise", "benchmark_runtime", "build_patch_set", "build_variant", "denoise",
    "evaluate_set", "load_checkpoint", "load_image", "lr_at_epoch", "param_count", "psnr", "receptive_fields",
    "residual_loss", "save_checkpoint", "save_image", "train_epoch",
]
