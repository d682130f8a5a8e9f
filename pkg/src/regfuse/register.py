"""Coarse affine + fine deformable registration by direct optimization of the
masked objective

    L_reg = epsilon * (-MNCC(registered, reference, mask)) [+ L_MG]

The affine stage runs Nelder-Mead over the six affine coefficients on an
image pyramid; the deformable stage runs smoothed, normalized gradient
descent on the displacement field over the same pyramid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.optimize import minimize

from . import fusion
from .geometry import (AffineParams, DeformationField, affine_from_pixels,
                       affine_to_pixels, apply_affine, apply_deformation,
                       invert_affine, invert_deformation)
from .mask import STRICT_THRESHOLD, as_mask, compute_mask, downsample_mask
from .metrics import DegenerateMetricError, mncc
from .raster import as_gray, check_same_shape, downsample2, gaussian_filter, laplacian, sample_grid

log = logging.getLogger(__name__)

MASK_MODES = ("ones", "ground_truth", "estimated")
CORRELATION_MODES = ("signed", "magnitude")
_PENALTY = 2.0
# reference border ring ignored in estimated mode, where zero-fill baked into
# the moving image would otherwise bleed in
ESTIMATED_MARGIN = 2


@dataclass(frozen=True)
class RegisterConfig:
    pyramid_levels: int = 3
    epsilon: float = 1.0
    use_mg: bool = False
    affine_max_evals: int = 2000
    deform_iters: int = 200
    deform_step: float = 0.25
    deform_smooth_sigma: float = 2.0
    mask_mode: str = "estimated"
    correlation_mode: str = "signed"
    # strict by default: threshold-0 fringes contain zero-filled samples
    mask_threshold: float = STRICT_THRESHOLD
    mg_fusion_iters: int = 60
    mg_gamma: float = 0.7

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.affine_max_evals < 1 or self.deform_iters < 0 or self.mg_fusion_iters < 1:
            raise ValueError("iteration counts must be positive")
        if not (self.deform_step > 0 and self.deform_smooth_sigma > 0):
            raise ValueError("deform_step and deform_smooth_sigma must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.correlation_mode not in CORRELATION_MODES:
            raise ValueError(f"correlation_mode must be one of {CORRELATION_MODES}")


@dataclass
class RegistrationResult:
    theta_hat: AffineParams
    phi_hat: DeformationField
    registered: np.ndarray
    objective_trace: dict = field(default_factory=dict)
    final_mncc: float = float("nan")
    mask: np.ndarray | None = None


# ---------------------------------------------------------------------------
# losses

def loss_mncc(reference, warped, mask) -> float:
    return -mncc(warped, reference, mask)


def loss_mg(x, y_warped, y_true, mask, gamma: float = 0.7,
            fusion_cfg: fusion.FusionConfig | None = None) -> float:
    """Masked RMS gap between Laplacians of two fusions with ``x``.

    The fusion operator is :func:`regfuse.fusion.fuse`. Normalized by the
    total pixel count, so an all-zero mask gives exactly 0.
    """
    m = as_mask(mask, np.shape(x)).astype(np.float64)
    if not m.any():
        return 0.0
    cfg = fusion_cfg or fusion.FusionConfig(gamma=gamma)
    lw = laplacian(fusion.fuse(x, y_warped, cfg).fused)
    lt = laplacian(fusion.fuse(x, y_true, cfg).fused)
    d = (lw - lt) * m
    return math.sqrt(float(np.mean(d * d)))


class _MaskedCorrelation:
    """-MNCC (or -MNCC^2) against a fixed reference and mask, with gradient."""

    def __init__(self, reference, mask, mode="signed", weight=1.0):
        self.m = as_mask(mask, reference.shape)
        if np.count_nonzero(self.m) < 2:
            raise DegenerateMetricError("mask selects fewer than 2 pixels")
        y = reference[self.m]
        self.yc = y - y.mean()
        self.ny = math.sqrt(float(np.dot(self.yc, self.yc)))
        if self.ny == 0.0:
            raise DegenerateMetricError("reference is constant inside the mask")
        self.mode = mode
        self.weight = weight

    def corr(self, warped) -> float:
        x = warped[self.m]
        xc = x - x.mean()
        nx = math.sqrt(float(np.dot(xc, xc)))
        if nx == 0.0:
            return 0.0
        return float(np.dot(xc, self.yc)) / (nx * self.ny)

    def loss(self, r: float) -> float:
        return -self.weight * (r * r if self.mode == "magnitude" else r)

    def __call__(self, warped) -> float:
        return self.loss(self.corr(warped))

    def value_and_grad(self, warped):
        x = warped[self.m]
        xc = x - x.mean()
        nx = math.sqrt(float(np.dot(xc, xc)))
        g = np.zeros_like(warped)
        if nx == 0.0:
            return self.loss(0.0), g
        r = float(np.dot(xc, self.yc)) / (nx * self.ny)
        dr = self.yc / (nx * self.ny) - r * xc / (nx * nx)
        scale = 2.0 * r if self.mode == "magnitude" else 1.0
        g[self.m] = -self.weight * scale * dr
        return self.loss(r), g


# ---------------------------------------------------------------------------
# pyramid helpers

def build_pyramid(img, levels: int) -> list[np.ndarray]:
    """Finest first; stops early once a side would drop below 16 px."""
    pyr = [np.asarray(img, dtype=np.float64)]
    while len(pyr) < levels and min(pyr[-1].shape) >= 32:
        pyr.append(downsample2(pyr[-1]))
    return pyr


def _mask_pyramid(mask, n):
    pyr = [np.asarray(mask, dtype=np.uint8)]
    while len(pyr) < n:
        pyr.append(downsample_mask(pyr[-1]))
    return pyr


def _resolve_mask(mode, shape, mask, theta_hat=None, phi_hat=None, threshold=0.0):
    if mode == "estimated" and theta_hat is not None:
        phi_fwd = None if phi_hat is None else invert_deformation(phi_hat)
        m = compute_mask(shape, invert_affine(theta_hat), phi_fwd, threshold)
        return m * _interior(shape, ESTIMATED_MARGIN).astype(np.uint8)
    if mask is not None:
        return np.asarray(mask, dtype=np.uint8)
    if mode == "ground_truth":
        raise ValueError("mask_mode='ground_truth' needs a ground-truth mask")
    return np.ones(shape, dtype=np.uint8)


# ---------------------------------------------------------------------------
# affine stage

class _AffineLevel:
    def __init__(self, moving):
        self.moving = moving
        self.shape = moving.shape
        h, w = moving.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        self.xs, self.ys = xs, ys

    def warp(self, p):
        m = affine_to_pixels(AffineParams(*p), self.shape)
        sx = m[0, 0] * self.xs + m[0, 1] * self.ys + m[0, 2]
        sy = m[1, 0] * self.xs + m[1, 1] * self.ys + m[1, 2]
        return sample_grid(self.moving, sx, sy)


def _interior(shape, margin):
    m = np.zeros(shape, dtype=bool)
    m[margin:shape[0] - margin, margin:shape[1] - margin] = True
    return m


def _plausible(q) -> bool:
    """Reject non-finite or wildly scaled/sheared linear parts."""
    if not np.all(np.isfinite(q)):
        return False
    sv = np.linalg.svd(np.array([[q[0], q[1]], [q[2], q[3]]]), compute_uv=False)
    return sv[1] > 0.5 and sv[0] < 2.0


def _translation_search(fun, p, shape, frac=0.15):
    """Best integer pixel shift within +-frac of the image size (exhaustive)."""
    h, w = shape
    r = max(1, int(math.ceil(frac * max(h, w))))
    sx, sy = 2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)
    best_q, best_v = p, fun(p)
    for ty in range(-r, r + 1):
        for tx in range(-r, r + 1):
            q = p.copy()
            q[4] += tx * sx
            q[5] += ty * sy
            v = fun(q)
            if v < best_v:
                best_q, best_v = q, v
    return best_q, best_v


# linear parts tried at the coarsest level, as (scale, rotation in degrees)
_COARSE_GRID = [(s, r) for s in (0.92, 1.0, 1.08) for r in (-6.0, 0.0, 6.0)]
_COARSE_STARTS = 3


def _coarse_starts(fun, shape):
    """Translation search under each grid linear part (about the image
    centre); returns the best few as simplex starting points."""
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    found = []
    for scale, deg in _COARSE_GRID:
        r = math.radians(deg)
        lin = scale * np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = c - lin @ c
        q, v = _translation_search(fun, np.array(affine_from_pixels(m, shape).as_tuple()), shape)
        found.append((v, len(found), q))
    found.sort(key=lambda t: t[:2])
    return [q for _, _, q in found[:_COARSE_STARTS]]


def register_affine(reference, moving, cfg: RegisterConfig | None = None, mask=None):
    """Coarse-to-fine Nelder-Mead on the six affine coefficients.

    Returns ``(theta_hat, trace)`` where ``trace`` maps ``"affine/L<level>"``
    to the best-so-far objective after each simplex iteration (level 0 is
    full resolution). ``theta_hat`` warps ``moving`` onto ``reference``.

    In ``estimated`` mask mode every evaluation restricts the correlation to
    pixels whose sample lands inside ``moving`` under the candidate
    transform, i.e. the region the candidate itself can reconstruct.
    """
    cfg = cfg or RegisterConfig()
    reference = as_gray(reference, "reference")
    moving = as_gray(moving, "moving")
    check_same_shape(reference, moving)
    estimated = cfg.mask_mode == "estimated"
    full_mask = _resolve_mask("ones" if estimated else cfg.mask_mode, reference.shape, mask)

    ref_pyr = build_pyramid(reference, cfg.pyramid_levels)
    mov_pyr = build_pyramid(moving, cfg.pyramid_levels)
    n = len(ref_pyr)
    mask_pyr = _mask_pyramid(full_mask, n)

    p = np.array(AffineParams.identity().as_tuple())
    trace = {}
    for lvl in range(n - 1, -1, -1):
        ref_l, level, m_l = ref_pyr[lvl], _AffineLevel(mov_pyr[lvl]), mask_pyr[lvl].astype(bool)
        if estimated:
            m_l = m_l & _interior(ref_l.shape, ESTIMATED_MARGIN)
        obj = None if estimated else _MaskedCorrelation(ref_l, m_l, cfg.correlation_mode,
                                                        cfg.epsilon)
        best = [math.inf]

        def fun(q, obj=obj, level=level, ref_l=ref_l, m_l=m_l, best=best):
            if not _plausible(q):
                val = _PENALTY
            else:
                warped, inside = level.warp(q)
                if obj is not None:
                    val = obj(warped)
                else:
                    valid = m_l & inside
                    if np.count_nonzero(valid) < 0.25 * valid.size:
                        val = _PENALTY
                    else:
                        try:
                            val = _MaskedCorrelation(ref_l, valid, cfg.correlation_mode,
                                                     cfg.epsilon)(warped)
                        except DegenerateMetricError:
                            val = _PENALTY
            best[0] = min(best[0], val)
            return val

        h, w = ref_l.shape
        starts = _coarse_starts(fun, (h, w)) if lvl == n - 1 else [p]
        # simplex spans ~2 px of translation and a few percent of linear change
        t_step = 4.0 / max(min(h, w) - 1, 1)
        steps = np.array([0.04, 0.04, 0.04, 0.04, t_step, t_step])
        start_val = fun(p)
        level_trace = [start_val]
        best_x, best_v, nfev = p, start_val, 0
        for x0 in starts:
            simplex = np.vstack([x0] + [x0 + np.eye(6)[i] * steps[i] for i in range(6)])
            res = minimize(fun, x0, method="Nelder-Mead",
                           callback=lambda _xk, lt=level_trace, best=best: lt.append(best[0]),
                           options={"initial_simplex": simplex, "maxfev": cfg.affine_max_evals,
                                    "xatol": 1e-6, "fatol": 1e-9})
            nfev += res.nfev
            cand = np.asarray(res.x)
            v = fun(cand)
            if v <= best_v:
                best_x, best_v = cand, v
        p = best_x
        trace[f"affine/L{lvl}"] = level_trace
        log.debug("affine level %d: %s -> %.6f (%d evals)", lvl, level_trace[0],
                  level_trace[-1], nfev)
    return AffineParams(*map(float, p)), trace


# ---------------------------------------------------------------------------
# deformable stage

def _upsample_field(dx, dy, shape):
    """Bilinear 2x upsampling of a coarse field to ``shape`` (values doubled)."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (ys - 0.5) / 2.0, (xs - 0.5) / 2.0
    up = [2.0 * map_coordinates(c, [cy, cx], order=1, mode="nearest") for c in (dx, dy)]
    return up[0], up[1]


class _DeformLevel:
    def __init__(self, moving, reference, mask, cfg):
        self.moving = moving
        h, w = moving.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        self.xs, self.ys = xs, ys
        self.gy, self.gx = np.gradient(moving)
        self.obj = _MaskedCorrelation(reference, mask, cfg.correlation_mode, cfg.epsilon)

    def warp(self, dx, dy):
        return sample_grid(self.moving, self.xs + dx, self.ys + dy)[0]

    def value(self, dx, dy):
        return self.obj(self.warp(dx, dy))

    def descent(self, dx, dy):
        warped = self.warp(dx, dy)
        val, g = self.obj.value_and_grad(warped)
        px, py = self.xs + dx, self.ys + dy
        gx = sample_grid(self.gx, px, py)[0]
        gy = sample_grid(self.gy, px, py)[0]
        return val, -g * gx, -g * gy


def register_deformable(reference, moving_affined, cfg: RegisterConfig | None = None,
                        mask=None, partner=None):
    """Estimate a displacement field so that ``E(moving_affined, phi)`` matches
    ``reference``.

    Each iteration takes the -MNCC gradient w.r.t. the field, smooths it with
    a Gaussian (``deform_smooth_sigma``), rescales it to a maximum length of
    ``deform_step`` pixels and backtracks until the objective decreases.
    With ``use_mg`` the finest level also includes the fusion-gradient loss
    against ``partner`` (defaults to ``reference``) in the accepted objective;
    its search direction still comes from the correlation term alone.
    """
    cfg = cfg or RegisterConfig()
    reference = as_gray(reference, "reference")
    moving_affined = as_gray(moving_affined, "moving")
    check_same_shape(reference, moving_affined)
    shape = reference.shape
    if cfg.deform_iters == 0:
        return DeformationField.zeros(shape), {}
    full_mask = _resolve_mask(cfg.mask_mode, shape, mask)

    ref_pyr = build_pyramid(reference, cfg.pyramid_levels)
    mov_pyr = build_pyramid(moving_affined, cfg.pyramid_levels)
    n = len(ref_pyr)
    mask_pyr = _mask_pyramid(full_mask, n)
    sigma = cfg.deform_smooth_sigma
    ksize = max(1, int(math.ceil(3 * sigma)))

    mg = None
    if cfg.use_mg:
        x = reference if partner is None else as_gray(partner, "partner")
        fcfg = fusion.FusionConfig(gamma=cfg.mg_gamma, max_iters=cfg.mg_fusion_iters)
        lap_true = laplacian(fusion.fuse(x, reference, fcfg).fused)
        m_f = mask_pyr[0].astype(np.float64)

        def _mg(warped):
            d = (laplacian(fusion.fuse(x, warped, fcfg).fused) - lap_true) * m_f
            return math.sqrt(float(np.mean(d * d)))

        mg = _mg

    dx = dy = None
    trace = {}
    for lvl in range(n - 1, -1, -1):
        level = _DeformLevel(mov_pyr[lvl], ref_pyr[lvl], mask_pyr[lvl], cfg)
        use_mg_here = mg is not None and lvl == 0

        def objective(ax, ay, level=level, use_mg_here=use_mg_here):
            if use_mg_here:
                w = level.warp(ax, ay)
                return level.obj(w) + mg(w)
            return level.value(ax, ay)

        zero = np.zeros(ref_pyr[lvl].shape)
        if dx is None:
            dx, dy = zero, zero.copy()
        else:
            dx, dy = _upsample_field(dx, dy, ref_pyr[lvl].shape)
        cur = objective(dx, dy)
        if lvl == 0:
            # never start the finest level worse than no deformation at all
            at_zero = objective(zero, zero)
            if at_zero < cur:
                dx, dy, cur = zero, zero.copy(), at_zero
        level_trace = [cur]
        step = cfg.deform_step
        for _ in range(cfg.deform_iters):
            _, ux, uy = level.descent(dx, dy)
            ux = gaussian_filter(ux, sigma, ksize)
            uy = gaussian_filter(uy, sigma, ksize)
            peak = float(np.max(np.hypot(ux, uy)))
            if peak == 0.0:
                break
            ux, uy = ux / peak, uy / peak
            accepted = False
            while step > cfg.deform_step / 256:
                cx, cy = dx + step * ux, dy + step * uy
                new = objective(cx, cy)
                if new < cur:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            dx, dy, cur = cx, cy, new
            level_trace.append(cur)
            step = min(2.0 * step, cfg.deform_step)
        trace[f"deformable/L{lvl}"] = level_trace
        log.debug("deformable level %d: %.6f -> %.6f in %d steps", lvl,
                  level_trace[0], level_trace[-1], len(level_trace) - 1)
    return DeformationField(dx, dy), trace


# ---------------------------------------------------------------------------
# full pipeline

def register(reference, moving, cfg: RegisterConfig | None = None,
             gt_theta: AffineParams | None = None, gt_phi: DeformationField | None = None,
             partner=None) -> RegistrationResult:
    """Affine stage, then deformable stage, then final masked correlation.

    ``gt_theta`` / ``gt_phi`` describe the forward misalignment that produced
    ``moving`` and are only needed for ``mask_mode='ground_truth'``.
    """
    cfg = cfg or RegisterConfig()
    reference = as_gray(reference, "reference")
    moving = as_gray(moving, "moving")
    check_same_shape(reference, moving)
    shape = reference.shape

    gt_mask = None
    if cfg.mask_mode == "ground_truth":
        if gt_theta is None:
            raise ValueError("mask_mode='ground_truth' needs gt_theta")
        gt_mask = compute_mask(shape, gt_theta, gt_phi, cfg.mask_threshold)

    theta_hat, trace = register_affine(reference, moving, cfg, gt_mask)
    moving_aff = apply_affine(moving, theta_hat)

    stage_mask = gt_mask
    if cfg.mask_mode == "estimated":
        stage_mask = _resolve_mask("estimated", shape, None, theta_hat,
                                   threshold=cfg.mask_threshold)
    phi_hat, trace_d = register_deformable(reference, moving_aff, cfg, stage_mask, partner)
    trace.update(trace_d)
    registered = apply_deformation(moving_aff, phi_hat)

    if cfg.mask_mode == "estimated":
        final_mask = _resolve_mask("estimated", shape, None, theta_hat, phi_hat,
                                   cfg.mask_threshold)
    elif gt_mask is not None:
        final_mask = gt_mask
    else:
        final_mask = np.ones(shape, dtype=np.uint8)
    try:
        final = mncc(registered, reference, final_mask)
    except DegenerateMetricError:
        final = float("nan")
    return RegistrationResult(theta_hat, phi_hat, registered, trace, final, final_mask)

