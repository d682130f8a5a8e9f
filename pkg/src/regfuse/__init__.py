"""Masked multi-modal registration and gradient-aware fusion by direct optimization."""

from .fusion import FusionConfig, FusionResult, fuse, target_gradient
from .geometry import (AffineParams, DeformationField, apply_affine, apply_deformation,
                       compose_affine, invert_affine, invert_deformation)
from .mask import compute_mask, mask_fraction
from .metrics import mncc, ncc
from .raster import load_pgm, save_pgm
from .register import RegisterConfig, RegistrationResult, register
from .simulate import AugmentationRanges, ElasticParams, make_misaligned_pair

__all__ = [
    "AffineParams", "AugmentationRanges", "DeformationField", "ElasticParams",
    "FusionConfig", "FusionResult", "RegisterConfig", "RegistrationResult",
    "apply_affine", "apply_deformation", "compose_affine", "compute_mask", "fuse",
    "invert_affine", "invert_deformation", "load_pgm", "make_misaligned_pair",
    "mask_fraction", "mncc", "ncc", "register", "save_pgm", "target_gradient",
]
__version__ = "0.1.0"
