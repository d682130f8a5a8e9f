"""Registration and fusion quality metrics.

Registration: NCC, MSE and their masked forms MNCC, MMSE.
Fusion: EI, SF, CE, FMIw, Qcv. The fusion metrics are toolkit variants
(FMIw on Sobel-magnitude features, Qcv with a Gaussian low-pass) and are
only comparable with other numbers produced here.
"""

from __future__ import annotations

import math

import numpy as np

from .mask import as_mask, mask_fraction
from .raster import as_gray, check_same_shape, gaussian_filter, sobel_magnitude

CE_EPS = 1e-12
FMI_BINS = 64
QCV_SIGMA = 2.0
QCV_K = 4


class DegenerateMetricError(ValueError):
    """Metric undefined for the given input (empty mask, zero variance)."""


def _pair(x, y):
    x = as_gray(x, "x")
    y = as_gray(y, "y")
    check_same_shape(x, y)
    return x, y


def _pearson(xv, yv) -> float:
    xc = xv - xv.mean()
    yc = yv - yv.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateMetricError("correlation undefined: zero variance")
    r = float(np.dot(xc, yc)) / (math.sqrt(sxx) * math.sqrt(syy))
    return min(1.0, max(-1.0, r))


def ncc(x, y) -> float:
    x, y = _pair(x, y)
    return _pearson(x.ravel(), y.ravel())


def mncc(x, y, mask) -> float:
    """Pearson correlation with means and sums restricted to mask == 1."""
    x, y = _pair(x, y)
    m = as_mask(mask, x.shape)
    if np.count_nonzero(m) < 2:
        raise DegenerateMetricError("mask selects fewer than 2 pixels")
    return _pearson(x[m], y[m])


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def mmse(x, y, mask) -> float:
    x, y = _pair(x, y)
    m = as_mask(mask, x.shape)
    if not m.any():
        raise DegenerateMetricError("empty mask")
    return float(np.mean((x[m] - y[m]) ** 2))


def edge_intensity(f) -> float:
    """Mean Sobel gradient magnitude on the 8-bit scale."""
    return float(np.mean(sobel_magnitude(as_gray(f)))) * 255.0


def spatial_frequency(f) -> float:
    f = as_gray(f)
    if f.shape[0] < 2 or f.shape[1] < 2:
        raise ValueError("spatial frequency needs at least 2x2 pixels")
    rf = math.sqrt(float(np.mean(np.diff(f, axis=1) ** 2)))
    cf = math.sqrt(float(np.mean(np.diff(f, axis=0) ** 2)))
    return math.hypot(rf, cf) * 255.0


def gray_levels(img) -> np.ndarray:
    """8-bit level (0..255) of each pixel."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.int64)


def histogram256(img) -> np.ndarray:
    h = np.bincount(gray_levels(img).ravel(), minlength=256).astype(np.float64)
    return h / h.sum()


def kl_bits(p, q, eps: float = CE_EPS) -> float:
    """D(p || q) in bits. Empty bins of q are raised to eps and q renormalized."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q > 0, q, eps)
    q = q / q.sum()
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log2(p[nz] / q[nz]))))


def cross_entropy(v, r, f) -> float:
    v, r = _pair(v, r)
    f = as_gray(f, "f")
    check_same_shape(v, f)
    hf = histogram256(f)
    return 0.5 * (kl_bits(histogram256(v), hf) + kl_bits(histogram256(r), hf))


def quantize(feature, bins: int) -> np.ndarray:
    """Equal-width bin index over the feature's own [min, max]."""
    lo, hi = float(feature.min()), float(feature.max())
    if hi == lo:
        return np.zeros(feature.shape, dtype=np.int64)
    idx = np.floor((feature - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _entropy_bits(p) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def normalized_mutual_information(a, b, bins: int = FMI_BINS) -> float:
    """2 I(A;B) / (H(A) + H(B)); 0 when both are constant."""
    ia = quantize(a, bins).ravel()
    ib = quantize(b, bins).ravel()
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).astype(np.float64)
    joint = joint.reshape(bins, bins) / ia.size
    ha = _entropy_bits(joint.sum(axis=1))
    hb = _entropy_bits(joint.sum(axis=0))
    if ha + hb == 0.0:
        return 0.0
    mi = ha + hb - _entropy_bits(joint.ravel())
    return min(1.0, max(0.0, 2.0 * mi / (ha + hb)))


def fmi_w(v, r, f) -> float:
    """Feature mutual information on Sobel-magnitude features."""
    v, r = _pair(v, r)
    f = as_gray(f, "f")
    check_same_shape(v, f)
    gf = sobel_magnitude(f)
    return 0.5 * (normalized_mutual_information(sobel_magnitude(v), gf)
                  + normalized_mutual_information(sobel_magnitude(r), gf))


def _blocks(shape, window):
    h, w = shape
    for i in range(0, h, window):
        for j in range(0, w, window):
            yield slice(i, i + window), slice(j, j + window)


def q_cv(v, r, f, window: int = 16) -> float:
    """Saliency-weighted local MSE between sources and fused image (x 255^2).

    Per window x window block, source saliency is the summed squared Sobel
    magnitude and the distortion is the mean square of the Gaussian-filtered
    difference. Blocks at the right/bottom edge may be partial.
    """
    if window < 4:
        raise ValueError(f"window must be >= 4, got {window}")
    v, r = _pair(v, r)
    f = as_gray(f, "f")
    check_same_shape(v, f)
    sal_v = sobel_magnitude(v) ** 2
    sal_r = sobel_magnitude(r) ** 2
    dv = gaussian_filter(v - f, QCV_SIGMA, QCV_K) ** 2
    dr = gaussian_filter(r - f, QCV_SIGMA, QCV_K) ** 2
    num = den = 0.0
    plain = []
    for blk in _blocks(v.shape, window):
        lv, lr = float(sal_v[blk].sum()), float(sal_r[blk].sum())
        ev, er = float(dv[blk].mean()), float(dr[blk].mean())
        num += lv * ev + lr * er
        den += lv + lr
        plain.append(0.5 * (ev + er))
    if den == 0.0:
        # flat sources: no saliency to weight by
        return float(np.mean(plain)) * 255.0**2
    return num / den * 255.0**2


REGISTRATION_METRICS = ("ncc", "mse", "mncc", "mmse")
FUSION_METRICS = ("ei", "sf", "ce", "fmi_w", "q_cv")


def registration_report(reference, registered, mask=None) -> dict:
    rep = {"ncc": ncc(registered, reference), "mse": mse(registered, reference)}
    if mask is not None:
        rep["mncc"] = mncc(registered, reference, mask)
        rep["mmse"] = mmse(registered, reference, mask)
        rep["mask_fraction"] = mask_fraction(mask)
    return rep


def fusion_report(v, r, f, qcv_window: int = 16) -> dict:
    return {
        "ei": edge_intensity(f),
        "sf": spatial_frequency(f),
        "ce": cross_entropy(v, r, f),
        "fmi_w": fmi_w(v, r, f),
        "q_cv": q_cv(v, r, f, qcv_window),
    }


def aggregate(reports: list[dict]) -> dict:
    """mean and population std of every numeric key present in all reports."""
    if not reports:
        return {}
    keys = [k for k in reports[0] if all(isinstance(r.get(k), (int, float)) for r in reports)]
    out = {}
    for k in keys:
        vals = np.array([float(r[k]) for r in reports])
        mean, std = float(vals.mean()), float(vals.std())
        out[k] = {"mean": mean, "std": std, "text": f"{mean:.3f}±{std:.3f}"}
    return out
