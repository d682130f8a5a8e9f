"""Affine transforms, displacement fields and grid-sample warping.

Affine parameters act on normalized coordinates in [-1, 1]^2 (the
spatial-transformer convention, ``align_corners=True``): pixel ``x`` maps to
``2 x / (W - 1) - 1``. Warps are inverse maps: the output at ``p`` samples the
input at ``theta(p)`` (or at ``p + phi(p)`` for a displacement field).

Displacement fields stay in pixel units.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .raster import as_gray, load_pfm, sample_grid, save_pfm

DET_EPS = 1e-8


class SingularTransformError(ValueError):
    pass


@dataclass(frozen=True)
class AffineParams:
    """theta = [[a, b, dx], [c, d, dy]] in normalized coordinates."""

    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        vals = (self.a, self.b, self.c, self.d, self.dx, self.dy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite affine parameters {vals}")
        if abs(self.det) < DET_EPS:
            raise SingularTransformError(f"near-singular affine (det={self.det:.3g})")

    @property
    def det(self) -> float:
        return self.a * self.d - self.b * self.c

    @classmethod
    def identity(cls) -> AffineParams:
        return cls()

    def as_tuple(self) -> tuple[float, ...]:
        return (self.a, self.b, self.c, self.d, self.dx, self.dy)

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b, self.dx],
                         [self.c, self.d, self.dy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, m) -> AffineParams:
        m = np.asarray(m, dtype=np.float64)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]),
                   float(m[0, 2]), float(m[1, 2]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AffineParams:
        keys = {"a", "b", "c", "d", "dx", "dy"}
        if set(d) != keys:
            raise ValueError(f"affine JSON needs exactly the keys {sorted(keys)}")
        return cls(**{k: float(d[k]) for k in keys})

    @classmethod
    def from_pixel_shift(cls, tx: float, ty: float, shape) -> AffineParams:
        """Pure translation whose warp samples the input at ``p + (tx, ty)``.

        Warping with this moves image content by ``(-tx, -ty)`` pixels.
        """
        sx, sy = _scales(shape)
        return cls(dx=tx * sx, dy=ty * sy)


def save_affine(theta: AffineParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(theta.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_affine(path) -> AffineParams:
    with open(path) as fh:
        return AffineParams.from_dict(json.load(fh))


def _scales(shape) -> tuple[float, float]:
    h, w = shape[:2]
    return 2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)


def invert_affine(theta: AffineParams) -> AffineParams:
    """Inverse linear part applied to the negated translation."""
    det = theta.det
    if abs(det) < DET_EPS:
        raise SingularTransformError(f"near-singular affine (det={det:.3g})")
    ia, ib = theta.d / det, -theta.b / det
    ic, id_ = -theta.c / det, theta.a / det
    return AffineParams(ia, ib, ic, id_,
                        -(ia * theta.dx + ib * theta.dy),
                        -(ic * theta.dx + id_ * theta.dy))


def compose_affine(first: AffineParams, second: AffineParams) -> AffineParams:
    """Coordinate map ``p -> second(first(p))``.

    Note the image-warp order is reversed: warping by ``t1`` then by ``t2``
    equals one warp by ``compose_affine(t2, t1)``.
    """
    return AffineParams.from_matrix(second.matrix() @ first.matrix())


def affine_to_pixels(theta: AffineParams, shape) -> np.ndarray:
    """3x3 matrix of the same map expressed in pixel coordinates."""
    sx, sy = _scales(shape)
    a, b, c, d, dx, dy = theta.as_tuple()
    return np.array([
        [a, b * sy / sx, (dx + 1.0 - a - b) / sx],
        [c * sx / sy, d, (dy + 1.0 - c - d) / sy],
        [0.0, 0.0, 1.0],
    ])


def affine_from_pixels(m, shape) -> AffineParams:
    sx, sy = _scales(shape)
    m = np.asarray(m, dtype=np.float64)
    a, d = m[0, 0], m[1, 1]
    b = m[0, 1] * sx / sy
    c = m[1, 0] * sy / sx
    return AffineParams(float(a), float(b), float(c), float(d),
                        float(m[0, 2] * sx - 1.0 + a + b),
                        float(m[1, 2] * sy - 1.0 + c + d))


def affine_coords(theta: AffineParams, shape) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates sampled by every output pixel."""
    h, w = shape[:2]
    m = affine_to_pixels(theta, shape)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # zero coefficients are skipped so identity maps are bit-exact
    src_x = m[0, 0] * xs + m[0, 2]
    if m[0, 1] != 0.0:
        src_x = src_x + m[0, 1] * ys
    src_y = m[1, 1] * ys + m[1, 2]
    if m[1, 0] != 0.0:
        src_y = src_y + m[1, 0] * xs
    return src_x, src_y


def apply_affine(img, theta: AffineParams, with_inside: bool = False):
    img = as_gray(img)
    xs, ys = affine_coords(theta, img.shape)
    out, inside = sample_grid(img, xs, ys)
    return (out, inside) if with_inside else out


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-pixel displacement (pixels); output(x, y) samples (x+dx, y+dy)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError(f"dx/dy shapes differ or are not 2-D: {dx.shape} vs {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("non-finite displacements")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @classmethod
    def zeros(cls, shape) -> DeformationField:
        return cls(np.zeros(shape[:2]), np.zeros(shape[:2]))

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.dx ** 2 + self.dy ** 2)))

    def __neg__(self) -> DeformationField:
        return DeformationField(-self.dx, -self.dy)


def invert_deformation(phi: DeformationField) -> DeformationField:
    """First-order inverse: the negated field."""
    return -phi


def apply_deformation(img, phi: DeformationField, with_inside: bool = False):
    img = as_gray(img)
    if phi.shape != img.shape:
        raise ValueError(f"dimension mismatch: field {phi.shape} vs image {img.shape}")
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out, inside = sample_grid(img, xs + phi.dx, ys + phi.dy)
    return (out, inside) if with_inside else out


def save_field(phi: DeformationField, path) -> None:
    save_pfm([phi.dx, phi.dy, np.zeros_like(phi.dx)], path)


def load_field(path) -> DeformationField:
    data = load_pfm(path)
    if data.ndim != 3:
        raise ValueError(f"{path}: deformation field must be a 3-channel PFM")
    return DeformationField(data[0], data[1])


def corner_endpoint_error(estimate: AffineParams, truth: AffineParams, shape) -> float:
    """Mean pixel distance between where two affines send the image corners."""
    h, w = shape[:2]
    corners = np.array([[0, 0, 1], [w - 1, 0, 1], [0, h - 1, 1], [w - 1, h - 1, 1]],
                       dtype=np.float64).T
    pe = affine_to_pixels(estimate, shape) @ corners
    pt = affine_to_pixels(truth, shape) @ corners
    return float(np.mean(np.hypot(pe[0] - pt[0], pe[1] - pt[1])))
