"""Unsupervised through-plane upsampling of anisotropic volumes.

An autoencoder is trained to compress and reconstruct in-plane slices; new
intermediate slices are synthesized by decoding convex combinations of the
latent codes of adjacent slices. Training couples a reconstruction loss with
a synthesis loss that supervises the decoded midpoint code against the real
in-between slice.
"""

from .volume import Volume, load_volume, save_volume
from .model import ModelConfig, ModelParams, build_model, load_checkpoint, save_checkpoint
from .interp import alpha_set, convex_combine, synthesize_between, upsample_volume
from .training import TrainConfig, train
from .baseline import bspline_upsample_z
from .metrics import ssim, psnr, vif_p, wilcoxon_one_sided

__all__ = [
    "Volume",
    "load_volume",
    "save_volume",
    "ModelConfig",
    "ModelParams",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "alpha_set",
    "convex_combine",
    "synthesize_between",
    "upsample_volume",
    "TrainConfig",
    "train",
    "bspline_upsample_z",
    "ssim",
    "psnr",
    "vif_p",
    "wilcoxon_one_sided",
]

__version__ = "0.1.0"
