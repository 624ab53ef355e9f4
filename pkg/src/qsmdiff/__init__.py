"""Patch-based diffusion prior for susceptibility mapping from MRI local field maps."""

__version__ = "0.1.0"

from .denoiser import DenoiserModel, build_dataset, forward_eps, load_model, save_model, train
from .diffusion import NoiseSchedule, ddim_step, ddim_timesteps, make_schedule
from .dipole import DipoleKernel, NoiseSpec, dipole_kernel, forward_field, tkd_invert
from .estimators import QSMDiffInverter, TKDInversion
from .exceptions import QSMError
from .guidance import GuidanceConfig, sample
from .metrics import evaluate, hfen, psnr, seam_discontinuity, ssim
from .patches import PatchLayout, assemble, extract, plan_patches
from .phantom import make_phantom, simulate_acquisition
from .volume import NormalizationSpec, Volume, load_volume, resample_trilinear, save_volume

__all__ = [
    "DenoiserModel",
    "DipoleKernel",
    "GuidanceConfig",
    "NoiseSchedule",
    "NoiseSpec",
    "NormalizationSpec",
    "PatchLayout",
    "QSMDiffInverter",
    "QSMError",
    "TKDInversion",
    "Volume",
    "assemble",
    "build_dataset",
    "ddim_step",
    "ddim_timesteps",
    "dipole_kernel",
    "evaluate",
    "extract",
    "forward_eps",
    "forward_field",
    "hfen",
    "load_model",
    "load_volume",
    "make_phantom",
    "make_schedule",
    "plan_patches",
    "psnr",
    "resample_trilinear",
    "sample",
    "save_model",
    "save_volume",
    "seam_discontinuity",
    "simulate_acquisition",
    "ssim",
    "tkd_invert",
    "train",
]
