"""Loop-level re-implementations of the metric definitions, independent of the library code."""
import math

import numpy as np


def psnr_direct(a, b):
    total, count = 0.0, 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (float(x) - float(y)) ** 2
        count += 1
    mse = total / count
    return 100.0 if mse < 1e-10 else 10.0 * math.log10(1.0 / mse)


def ssim_direct(a, b, size=11, sigma=1.5):
    """SSIM from explicit zero-padded 11x11 windows with a 2D Gaussian weight."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, c = a.shape
    r = size // 2
    g = np.exp(-(np.arange(size) - r) ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    win = np.outer(g, g)
    pa = np.zeros((h + 2 * r, w + 2 * r, c))
    pb = np.zeros_like(pa)
    pa[r:r + h, r:r + w] = a
    pb[r:r + h, r:r + w] = b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                x = pa[i:i + size, j:j + size, ch]
                y = pb[i:i + size, j:j + size, ch]
                mx, my = np.sum(win * x), np.sum(win * y)
                vx = np.sum(win * x * x) - mx * mx
                vy = np.sum(win * y * y) - my * my
                cxy = np.sum(win * x * y) - mx * my
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def _median(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def track_scores_direct(errors, scored, thresholds=(1, 2, 4, 8, 16), limit=50.0):
    """(MTE, delta, survival) from a per-(track, t) error table and a scored mask."""
    flat = [errors[k][t] for k in range(len(errors)) for t in range(len(errors[k])) if scored[k][t]]
    mte = _median(flat)
    delta = 100.0 * sum(sum(1 for e in flat if e < th) / len(flat) for th in thresholds) / len(thresholds)
    rates = []
    for k in range(len(errors)):
        seq = [errors[k][t] for t in range(len(errors[k])) if scored[k][t]]
        if not seq:
            continue
        first = next((i for i, e in enumerate(seq) if e > limit), None)
        rates.append(1.0 if first is None else first / len(seq))
    return mte, delta, 100.0 * sum(rates) / len(rates)


def errors_3d_direct(pred, gt):
    return [[100.0 * math.dist(pred[k][t], gt[k][t]) for t in range(len(gt[k]))] for k in range(len(gt))]


def errors_2d_direct(pred, gt, width):
    return [[math.dist(pred[k][t], gt[k][t]) * 256.0 / width for t in range(len(gt[k]))] for k in range(len(gt))]
