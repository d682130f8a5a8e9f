"""Reconstructible-region masks.

A reference pixel is reconstructible when an all-ones image pushed through
the forward misalignment (affine, then elastic) and back again (inverse
elastic, then inverse affine) still has support there.
"""

from __future__ import annotations

import numpy as np

from .geometry import (AffineParams, DeformationField, apply_affine,
                       apply_deformation, invert_affine, invert_deformation)
from .raster import downsample2

STRICT_THRESHOLD = 0.999


def round_trip_support(size, theta: AffineParams, phi: DeformationField | None) -> np.ndarray:
    """The continuous round-trip image M' (before thresholding)."""
    h, w = size[:2]
    if phi is None:
        phi = DeformationField.zeros((h, w))
    if phi.shape != (h, w):
        raise ValueError(f"field shape {phi.shape} does not match size {(h, w)}")
    inv_theta = invert_affine(theta)
    m = np.ones((h, w))
    m_rf = apply_deformation(apply_affine(m, theta), phi)
    return apply_affine(apply_deformation(m_rf, invert_deformation(phi)), inv_theta)


def compute_mask(size, theta: AffineParams, phi: DeformationField | None = None,
                 threshold: float = 0.0) -> np.ndarray:
    """Binary mask (uint8 0/1) of reconstructible reference pixels.

    ``threshold=0`` keeps any pixel with positive round-trip support; bilinear
    fringes then admit partially supported border pixels. Use
    ``STRICT_THRESHOLD`` to drop them.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    return (round_trip_support(size, theta, phi) > threshold).astype(np.uint8)


def mask_fraction(mask) -> float:
    m = np.asarray(mask)
    return float(np.count_nonzero(m)) / m.size


def as_mask(mask, shape=None) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match {tuple(shape)}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be 0 or 1")
    return m.astype(bool)


def downsample_mask(mask) -> np.ndarray:
    """Strict AND over each 2x2 block."""
    m = np.asarray(mask, dtype=np.float64)
    return (downsample2(m) == 1.0).astype(np.uint8)
