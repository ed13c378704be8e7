"""Slice interpolation of anisotropic volumes by cross-view texture transfer."""
from .config import ExperimentConfig, load_config, save_config
from .estimator import CrossViewInterpolator, DepthInterpolator, sparse_from_dense
from .evaluation import MetricReport, baseline_interpolate, evaluate, psnr, ssim_view
from .volume import (
    Volume, downsample_depth, extract_view, foreground_mask, generate_phantom, load_avol,
    normalize_hu, sample_reference_indices, save_avol, upsample_depth_linear,
)

__version__ = "0.1.0"

__all__ = [
    "CrossViewInterpolator", "DepthInterpolator", "ExperimentConfig", "MetricReport", "Volume",
    "baseline_interpolate", "downsample_depth", "evaluate", "extract_view", "foreground_mask",
    "generate_phantom", "load_avol", "load_config", "normalize_hu", "psnr",
    "sample_reference_indices", "save_avol", "save_config", "sparse_from_dense", "ssim_view",
    "upsample_depth_linear",
]
