"""Grayscale rasters: file I/O and the per-pixel primitives shared by every
other module (bilinear sampling, fixed-kernel filters, SSIM).

Images are plain 2-D ``float64`` numpy arrays indexed ``[row, col]``.
Integer coordinates address pixel centres, so the image domain is
``[0, W-1] x [0, H-1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

# sample coordinates this close to an integer are treated as that integer
SNAP_TOL = 1e-9

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class RasterFormatError(ValueError):
    """Raised for unreadable or unsupported image files."""


@dataclass(frozen=True)
class SampleResult:
    value: float
    inside: bool


def as_gray(img, name="image") -> np.ndarray:
    """Validate and convert to a 2-D float64 array."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_same_shape(*imgs):
    shapes = {np.shape(i) for i in imgs}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# file formats

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise RasterFormatError("malformed header: unexpected end of file")
    return buf[start:pos], pos


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM with maxval 255 into [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise RasterFormatError(f"malformed header: magic {magic!r} is not P5")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise RasterFormatError(f"malformed header: bad field {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise RasterFormatError(f"malformed header: size {width}x{height}")
    if maxval != 255:
        raise RasterFormatError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = buf[pos:pos + width * height]
    if len(payload) < width * height:
        raise RasterFormatError(
            f"truncated payload: expected {width * height} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return data.astype(np.float64) / 255.0


def to_bytes(img) -> np.ndarray:
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.rint(a * 255.0).astype(np.uint8)


def save_pgm(img, path) -> None:
    a = to_bytes(as_gray(img))
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def save_pfm(channels, path) -> None:
    """Write a little-endian PFM.

    ``channels`` is either a 2-D array (written as grayscale ``Pf``) or a
    sequence of three 2-D arrays (written as colour ``PF``, R/G/B order).
    Rows are stored bottom-to-top as the format requires.
    """
    arr = np.asarray(channels, dtype=np.float32)
    if arr.ndim == 2:
        magic, data = b"Pf", arr
    elif arr.ndim == 3 and arr.shape[0] == 3:
        magic, data = b"PF", np.moveaxis(arr, 0, -1)
    else:
        raise ValueError(f"PFM needs 1 or 3 channels, got shape {arr.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a PFM; returns ``(H, W)`` for ``Pf`` and ``(3, H, W)`` for ``PF``."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"Pf", b"PF"):
        raise RasterFormatError(f"malformed header: magic {magic!r} is not a PFM")
    try:
        tok, pos = _read_token(buf, pos)
        width = int(tok)
        tok, pos = _read_token(buf, pos)
        height = int(tok)
        tok, pos = _read_token(buf, pos)
        scale = float(tok)
    except ValueError:
        raise RasterFormatError("malformed header: bad PFM field") from None
    pos += 1
    nch = 3 if magic == b"PF" else 1
    count = width * height * nch
    dtype = "<f4" if scale < 0 else ">f4"
    payload = buf[pos:pos + 4 * count]
    if len(payload) < 4 * count:
        raise RasterFormatError("truncated payload")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    data = data.reshape(height, width, nch)[::-1]
    if nch == 1:
        return np.ascontiguousarray(data[:, :, 0])
    return np.ascontiguousarray(np.moveaxis(data, -1, 0))


# ---------------------------------------------------------------------------
# sampling

def sample_grid(img, xs, ys):
    """Vectorised bilinear sampling with zero-fill.

    Returns ``(values, inside)`` arrays shaped like ``xs``. Taps outside the
    image contribute 0; ``inside`` is true where every tap carrying non-zero
    weight is in bounds, i.e. where the coordinate lies in the image domain.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("non-finite sample coordinates")
    rx, ry = np.rint(xs), np.rint(ys)
    xs = np.where(np.abs(xs - rx) < SNAP_TOL, rx, xs)
    ys = np.where(np.abs(ys - ry) < SNAP_TOL, ry, ys)

    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img
    # clamp far-away taps onto the zero ring
    xa = np.clip(x0, -1, w) + 1
    xb = np.clip(x0 + 1, -1, w) + 1
    ya = np.clip(y0, -1, h) + 1
    yb = np.clip(y0 + 1, -1, h) + 1

    top = padded[ya, xa] * (1.0 - fx) + padded[ya, xb] * fx
    bot = padded[yb, xa] * (1.0 - fx) + padded[yb, xb] * fx
    values = top * (1.0 - fy) + bot * fy
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    return values, inside


def bilinear_sample(img, x: float, y: float) -> SampleResult:
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("non-finite sample coordinates")
    v, ins = sample_grid(img, np.array([x]), np.array([y]))
    return SampleResult(float(v[0]), bool(ins[0]))


# ---------------------------------------------------------------------------
# fixed-kernel filters (replicate border)

def laplacian(img) -> np.ndarray:
    """4-neighbour Laplacian with replicate padding."""
    a = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    c = a[1:-1, 1:-1]
    # differences first so flat regions give exact zeros
    return (a[:-2, 1:-1] - c) + (a[2:, 1:-1] - c) + (a[1:-1, :-2] - c) + (a[1:-1, 2:] - c)


def laplacian_adjoint(g) -> np.ndarray:
    """Transpose of :func:`laplacian` as a linear operator."""
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape
    out = np.zeros((h + 2, w + 2))
    out[:-2, 1:-1] += g
    out[2:, 1:-1] += g
    out[1:-1, :-2] += g
    out[1:-1, 2:] += g
    out[1:-1, 1:-1] -= 4.0 * g
    # fold the replicated ring back onto the border pixels
    out[1, :] += out[0, :]
    out[-2, :] += out[-1, :]
    out[:, 1] += out[:, 0]
    out[:, -2] += out[:, -1]
    return out[1:-1, 1:-1]


def sobel(img) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses (correlation, replicate)."""
    a = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    left = a[:-2, :-2] + 2.0 * a[1:-1, :-2] + a[2:, :-2]
    right = a[:-2, 2:] + 2.0 * a[1:-1, 2:] + a[2:, 2:]
    up = a[:-2, :-2] + 2.0 * a[:-2, 1:-1] + a[:-2, 2:]
    down = a[2:, :-2] + 2.0 * a[2:, 1:-1] + a[2:, 2:]
    return right - left, down - up


def sobel_magnitude(img) -> np.ndarray:
    gx, gy = sobel(img)
    return np.sqrt(gx * gx + gy * gy)


def gaussian_kernel(sigma: float, k: int, normalize: bool = True) -> np.ndarray:
    """(2k+1) x (2k+1) Gaussian on a 1-based index grid centred at k+1.

    ``normalize=False`` returns the raw density values; otherwise the kernel
    is scaled to unit sum.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    idx = np.arange(1, 2 * k + 2, dtype=np.float64)
    d2 = (idx[:, None] - k - 1) ** 2 + (idx[None, :] - k - 1) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma)) / (2.0 * np.pi * sigma * sigma)
    if normalize:
        g = g / g.sum()
    return g


def _gaussian_1d(sigma: float, k: int) -> np.ndarray:
    t = np.arange(-k, k + 1, dtype=np.float64)
    g = np.exp(-t * t / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_filter(img, sigma: float, k: int) -> np.ndarray:
    """Filter with the unit-sum (2k+1)^2 Gaussian, replicate padding.

    The normalised 2-D kernel factors exactly into two 1-D passes.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    g = _gaussian_1d(sigma, k)
    a = np.asarray(img, dtype=np.float64)
    a = correlate1d(a, g, axis=0, mode="nearest")
    return correlate1d(a, g, axis=1, mode="nearest")


# ---------------------------------------------------------------------------
# SSIM

def window_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Dense (n, n) matrix of the 1-D Gaussian window with replicate border.

    ``A @ x`` filters a column; the 2-D window is ``A_h @ X @ A_w.T`` and its
    adjoint ``A_h.T @ Y @ A_w``.
    """
    half = size // 2
    g = _gaussian_1d(sigma, half)
    m = np.zeros((n, n))
    rows = np.arange(n)
    for off, wt in zip(range(-half, half + 1), g):
        cols = np.clip(rows + off, 0, n - 1)
        np.add.at(m, (rows, cols), wt)
    return m


class _Window:
    def __init__(self, shape):
        self.ah = window_matrix(shape[0])
        self.aw = window_matrix(shape[1])

    def __call__(self, x):
        return self.ah @ x @ self.aw.T

    def adjoint(self, y):
        return self.ah.T @ y @ self.aw


def _ssim_terms(a, b, win):
    mu_a, mu_b = win(a), win(b)
    s_aa = win(a * a) - mu_a * mu_a
    s_bb = win(b * b) - mu_b * mu_b
    s_ab = win(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * s_ab + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = s_aa + s_bb + SSIM_C2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean SSIM over an 11x11, sigma 1.5 Gaussian window (dynamic range 1)."""
    a = as_gray(a, "a")
    b = as_gray(b, "b")
    check_same_shape(a, b)
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b, _Window(a.shape))
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_with_grad(a, b, win=None) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its exact gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if win is None:
        win = _Window(a.shape)
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_terms(a, b, win)
    den = b1 * b2
    s = a1 * a2 / den
    n = a.size
    # partials of the local map w.r.t. mu_a, W(a*a), W(a*b)
    d_mu = (2.0 * mu_b * a2 - 2.0 * mu_b * a1) / den - s * (2.0 * mu_a / b1 - 2.0 * mu_a / b2)
    d_aa = -s / b2
    d_ab = 2.0 * a1 / den
    grad = (win.adjoint(d_mu) + 2.0 * a * win.adjoint(d_aa) + b * win.adjoint(d_ab)) / n
    return float(np.mean(s)), grad


def downsample2(img) -> np.ndarray:
    """2x area averaging; a trailing odd row/column is dropped."""
    a = np.asarray(img, dtype=np.float64)
    h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])
