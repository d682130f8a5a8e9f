"""Random rigid + elastic misalignment with known ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .geometry import (AffineParams, DeformationField, affine_from_pixels,
                       affine_to_pixels, apply_affine, apply_deformation)
from .raster import as_gray, gaussian_filter, gaussian_kernel  # noqa: F401

__all__ = [
    "AugmentationRanges", "ElasticParams", "make_rng", "gen_affine",
    "gaussian_kernel", "gen_deformation_field", "field_std", "make_misaligned_pair",
    "decompose_affine", "synthetic_scene",
]


@dataclass(frozen=True)
class AugmentationRanges:
    rotation_deg: float = 10.0
    translate_px: float = 25.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    shear_deg: float = 5.0

    def __post_init__(self):
        if self.rotation_deg < 0 or self.translate_px < 0 or self.shear_deg < 0:
            raise ValueError("augmentation bounds must be non-negative")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")

    @classmethod
    def none(cls) -> AugmentationRanges:
        return cls(0.0, 0.0, 1.0, 1.0, 0.0)


@dataclass(frozen=True)
class ElasticParams:
    sigma: float = 32.0
    k: int = 30
    # std of the raw noise before filtering, in pixels
    amplitude: float = 120.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator from an int, a SeedSequence, or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def _linear_part(rotation, shear, scale):
    cr, sr = math.cos(rotation), math.sin(rotation)
    rot = np.array([[cr, -sr], [sr, cr]])
    sh = np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
    return rot @ sh @ (scale * np.eye(2))


def gen_affine(ranges: AugmentationRanges, img_size, seed) -> AffineParams:
    """theta = rotation . shear . scale . translation about the image centre.

    Draw order is rotation, shear, scale, tx, ty. Translation is in pixels
    and converted to normalized units through ``img_size``.
    """
    rng = make_rng(seed)
    rot = math.radians(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
    shear = math.radians(rng.uniform(-ranges.shear_deg, ranges.shear_deg))
    scale = rng.uniform(ranges.scale_min, ranges.scale_max)
    t = rng.uniform(-ranges.translate_px, ranges.translate_px, size=2)

    h, w = img_size[:2]
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    lin = _linear_part(rot, shear, scale)
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = centre + lin @ t - lin @ centre
    return affine_from_pixels(m, img_size)


def decompose_affine(theta: AffineParams, img_size) -> dict:
    """Recover (rotation, shear, scale, tx, ty) of :func:`gen_affine`.

    Exact for matrices of that form; for others the linear part is split by
    a QR factorization and ``scale`` is the first diagonal entry.
    """
    h, w = img_size[:2]
    m = affine_to_pixels(theta, img_size)
    lin = m[:2, :2]
    rot = math.atan2(lin[1, 0], lin[0, 0])
    cr, sr = math.cos(rot), math.sin(rot)
    upper = np.array([[cr, sr], [-sr, cr]]) @ lin
    scale = upper[0, 0]
    shear = math.atan2(upper[0, 1], scale)
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    t = np.linalg.solve(lin, m[:2, 2] - centre + lin @ centre)
    return {
        "rotation_deg": math.degrees(rot),
        "shear_deg": math.degrees(shear),
        "scale": float(scale),
        "scale_y": float(upper[1, 1]),
        "tx": float(t[0]),
        "ty": float(t[1]),
    }


def gen_deformation_field(size, params: ElasticParams, seed) -> DeformationField:
    """Gaussian noise of std ``amplitude`` filtered by the unit-sum kernel.

    Noise is drawn on a grid extended by ``k`` on every side and only the
    fully supported centre is kept, so displacement statistics are the same
    everywhere: per-component std is ``amplitude * sqrt(sum(kernel**2))``.
    """
    rng = make_rng(seed)
    h, w = size[:2]
    k = params.k
    kernel = gaussian_kernel(params.sigma, k)
    noise = rng.normal(0.0, 1.0, size=(2, h + 2 * k, w + 2 * k)) * params.amplitude
    dx = fftconvolve(noise[0], kernel, mode="valid")
    dy = fftconvolve(noise[1], kernel, mode="valid")
    return DeformationField(dx, dy)


def field_std(params: ElasticParams) -> float:
    """Theoretical per-component displacement std of gen_deformation_field."""
    kernel = gaussian_kernel(params.sigma, params.k)
    return params.amplitude * float(np.sqrt(np.sum(kernel ** 2)))


def make_misaligned_pair(img, ranges: AugmentationRanges, params: ElasticParams, seed):
    """Return ``(moving, theta, phi)`` with ``moving = E(S(img, theta), phi)``."""
    img = as_gray(img)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    s_theta, s_phi = ss.spawn(2)
    theta = gen_affine(ranges, img.shape, s_theta)
    phi = gen_deformation_field(img.shape, params, s_phi)
    moving = apply_deformation(apply_affine(img, theta), phi)
    return moving, theta, phi


def synthetic_scene(shape=(256, 256), seed=0) -> np.ndarray:
    """Procedural test image: smooth shading plus a handful of hard-edged shapes.

    Stands in for natural photographs in tests and experiment scripts.
    """
    rng = make_rng(seed)
    h, w = shape
    base = gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 8.0,
                           k=max(2, max(h, w) // 4))
    base = (base - base.min()) / max(np.ptp(base), 1e-12)
    img = 0.25 + 0.4 * base
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(8):
        cx, cy = rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)
        rx, ry = rng.uniform(0.04, 0.18) * w, rng.uniform(0.04, 0.18) * h
        level = rng.uniform(0.0, 1.0)
        if rng.uniform() < 0.5:
            inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        else:
            inside = (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)
        img = np.where(inside, 0.5 * img + 0.5 * level, img)
    img = gaussian_filter(img, sigma=1.0, k=3)
    return np.clip(img, 0.0, 1.0)
