"""Brute-force reference implementations used as test oracles.

Everything here is written with explicit loops or textbook formulas and
shares no code with the package beyond plain numpy.
"""

import math

import numpy as np


def clamp(i, n):
    return min(max(i, 0), n - 1)


def correlate_replicate(img, kernel):
    """Direct 2-D correlation with replicate border, one output pixel at a time."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    kh, kw = kernel.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for j in range(kh):
                for i in range(kw):
                    acc += kernel[j, i] * img[clamp(y + j - ch, h), clamp(x + i - cw, w)]
            out[y, x] = acc
    return out


LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def laplacian(img):
    return correlate_replicate(img, LAPLACE)


def sobel_magnitude(img):
    gx = correlate_replicate(img, SOBEL_X)
    gy = correlate_replicate(img, SOBEL_Y)
    return np.sqrt(gx ** 2 + gy ** 2)


def gaussian_kernel_2d(sigma, k):
    """Kernel evaluated entry by entry on the 1-based grid, then unit-sum."""
    n = 2 * k + 1
    g = np.zeros((n, n))
    for x in range(1, n + 1):
        for y in range(1, n + 1):
            g[x - 1, y - 1] = math.exp(-((x - k - 1) ** 2 + (y - k - 1) ** 2)
                                       / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)
    return g / g.sum()


def gaussian_filter(img, sigma, k):
    return correlate_replicate(img, gaussian_kernel_2d(sigma, k))


def ssim(a, b, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Mean of per-pixel SSIM over explicit replicate-clamped windows."""
    h, w = a.shape
    half = size // 2
    g1 = [math.exp(-(t * t) / (2 * sigma * sigma)) for t in range(-half, half + 1)]
    s1 = sum(g1)
    g1 = [v / s1 for v in g1]
    total = 0.0
    for y in range(h):
        for x in range(w):
            ma = mb = saa = sbb = sab = 0.0
            for j in range(size):
                for i in range(size):
                    wt = g1[j] * g1[i]
                    pa = a[clamp(y + j - half, h), clamp(x + i - half, w)]
                    pb = b[clamp(y + j - half, h), clamp(x + i - half, w)]
                    ma += wt * pa
                    mb += wt * pb
                    saa += wt * pa * pa
                    sbb += wt * pb * pb
                    sab += wt * pa * pb
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / (
                (ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / (h * w)


# ---------------------------------------------------------------------------
# geometry

def homogeneous(t):
    """3x3 matrix of an affine given as (a, b, c, d, dx, dy)."""
    a, b, c, d, dx, dy = t
    return np.array([[a, b, dx], [c, d, dy], [0.0, 0.0, 1.0]])


def from_homogeneous(m):
    return (m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])


def map_pixel(t, x, y, h, w):
    """Output pixel (x, y) to the sampled input position via normalized coords."""
    xn = 2.0 * x / (w - 1) - 1.0
    yn = 2.0 * y / (h - 1) - 1.0
    a, b, c, d, dx, dy = t
    u = a * xn + b * yn + dx
    v = c * xn + d * yn + dy
    return (u + 1.0) * (w - 1) / 2.0, (v + 1.0) * (h - 1) / 2.0


def bilinear(img, x, y):
    """Textbook bilinear interpolation, zero outside the image."""
    h, w = img.shape
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0

    def px(i, j):
        return img[j, i] if 0 <= i < w and 0 <= j < h else 0.0

    return ((1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0)
            + (1 - fx) * fy * px(x0, y0 + 1) + fx * fy * px(x0 + 1, y0 + 1))


def warp_affine(img, t):
    h, w = img.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = bilinear(img, *map_pixel(t, x, y, h, w))
    return out


def warp_field(img, dx, dy):
    h, w = img.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = bilinear(img, x + dx[y, x], y + dy[y, x])
    return out


# ---------------------------------------------------------------------------
# mask coverage

def _support(covered, xs, ys):
    """Bool raster: does the bilinear sample at (xs, ys) touch a covered pixel
    through a tap with positive weight?"""
    h, w = covered.shape
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    out = np.zeros(xs.shape, dtype=bool)
    for ox, oy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + ox, y0 + oy
        ok = (wt > 0) & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        hit = np.zeros(xs.shape, dtype=bool)
        hit[ok] = covered[yi[ok], xi[ok]]
        out |= hit
    return out


def coverage_mask(shape, theta, dx, dy):
    """Positive-support propagation of an all-covered reference through the
    forward path (affine, then elastic) and the backward path (negated field,
    then inverse affine). Works on booleans only."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    inv = from_homogeneous(np.linalg.inv(homogeneous(theta)))

    def affine_pos(t):
        u, v = map_pixel(t, xs, ys, h, w)
        return u, v

    cov = np.ones(shape, dtype=bool)
    cov = _support(cov, *affine_pos(theta))
    cov = _support(cov, xs + dx, ys + dy)
    cov = _support(cov, xs - dx, ys - dy)
    return _support(cov, *affine_pos(inv))


# ---------------------------------------------------------------------------
# metrics

def pearson(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = sum((a - mx) ** 2 for a in xs)
    syy = sum((b - my) ** 2 for b in ys)
    return sxy / math.sqrt(sxx * syy)


def masked_values(img, mask):
    h, w = img.shape
    return [float(img[y, x]) for y in range(h) for x in range(w) if mask[y, x]]


def ncc(x, y):
    return pearson(list(x.ravel()), list(y.ravel()))


def mncc(x, y, mask):
    return pearson(masked_values(x, mask), masked_values(y, mask))


def mse(x, y):
    d = [(a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())]
    return sum(d) / len(d)


def mmse(x, y, mask):
    xs, ys = masked_values(x, mask), masked_values(y, mask)
    return sum((a - b) ** 2 for a, b in zip(xs, ys)) / len(xs)


def edge_intensity(f):
    return float(np.mean(sobel_magnitude(f))) * 255.0


def spatial_frequency(f):
    h, w = f.shape
    rf = [(f[y, x] - f[y, x - 1]) ** 2 for y in range(h) for x in range(1, w)]
    cf = [(f[y, x] - f[y - 1, x]) ** 2 for y in range(1, h) for x in range(w)]
    return math.sqrt(sum(rf) / len(rf) + sum(cf) / len(cf)) * 255.0


def histogram(img):
    counts = [0] * 256
    for v in img.ravel():
        counts[int(round(min(max(float(v), 0.0), 1.0) * 255.0))] += 1
    n = img.size
    return [c / n for c in counts]


def kl_bits(p, q, eps=1e-12):
    q = [v if v > 0 else eps for v in q]
    s = sum(q)
    q = [v / s for v in q]
    return max(0.0, sum(pi * math.log2(pi / qi) for pi, qi in zip(p, q) if pi > 0))


def cross_entropy(v, r, f):
    hf = histogram(f)
    return 0.5 * (kl_bits(histogram(v), hf) + kl_bits(histogram(r), hf))


def _bin(value, lo, hi, bins):
    if hi == lo:
        return 0
    return min(int(math.floor((value - lo) / (hi - lo) * bins)), bins - 1)


def _entropy(counts, n):
    return -sum((c / n) * math.log2(c / n) for c in counts if c > 0)


def nmi(a, b, bins=64):
    av, bv = list(a.ravel()), list(b.ravel())
    alo, ahi, blo, bhi = min(av), max(av), min(bv), max(bv)
    joint = {}
    ca, cb = [0] * bins, [0] * bins
    for x, y in zip(av, bv):
        i, j = _bin(x, alo, ahi, bins), _bin(y, blo, bhi, bins)
        joint[(i, j)] = joint.get((i, j), 0) + 1
        ca[i] += 1
        cb[j] += 1
    n = len(av)
    ha, hb = _entropy(ca, n), _entropy(cb, n)
    if ha + hb == 0:
        return 0.0
    mi = ha + hb - _entropy(list(joint.values()), n)
    return 2 * mi / (ha + hb)


def fmi_w(v, r, f):
    gf = sobel_magnitude(f)
    return 0.5 * (nmi(sobel_magnitude(v), gf) + nmi(sobel_magnitude(r), gf))


def q_cv(v, r, f, window):
    h, w = v.shape
    sv, sr = sobel_magnitude(v) ** 2, sobel_magnitude(r) ** 2
    dv = gaussian_filter(v - f, 2.0, 4) ** 2
    dr = gaussian_filter(r - f, 2.0, 4) ** 2
    num = den = 0.0
    for by in range(0, h, window):
        for bx in range(0, w, window):
            cells = [(y, x) for y in range(by, min(by + window, h))
                     for x in range(bx, min(bx + window, w))]
            lv = sum(sv[c] for c in cells)
            lr = sum(sr[c] for c in cells)
            ev = sum(dv[c] for c in cells) / len(cells)
            er = sum(dr[c] for c in cells) / len(cells)
            num += lv * ev + lr * er
            den += lv + lr
    return num / den * 255.0 ** 2


# ---------------------------------------------------------------------------
# fusion

def target_gradient(v, r, gamma):
    """Per-pixel selection rule written as an explicit if/else."""
    lv, lr = laplacian(v), laplacian(r)
    h, w = v.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if abs(lv[y, x]) > abs(lr[y, x]):
                s = lv[y, x]
            elif abs(lv[y, x]) < abs(lr[y, x]):
                s = lr[y, x]
            else:
                s = lv[y, x]
            out[y, x] = 0.0 if s == 0 else math.copysign(abs(s) ** gamma, s)
    return out
