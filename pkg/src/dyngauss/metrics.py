"""Image-quality and long-term tracking metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gaussians import InvalidParameterError
from .losses import ssim_map

PSNR_CAP = 100.0
THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
SURVIVAL_LIMIT = 50.0
CANVAS_WIDTH = 256.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def ssim(a, b) -> float:
    """Mean local SSIM, averaged over channels."""
    a, b = _pair(a, b)
    return float(np.mean(ssim_map(a, b)))


def _threshold_stats(err, scored, thresholds):
    """MTE, delta (mean over thresholds) and per-threshold fractions over scored entries."""
    vals = err[scored]
    if vals.size == 0:
        return float("nan"), float("nan"), [float("nan")] * len(thresholds)
    per = [100.0 * float(np.mean(vals < th)) for th in thresholds]
    return float(np.median(vals)), float(np.mean(per)), per


def _survival(err, scored, limit):
    rates = []
    for e, s in zip(err, scored):
        e = e[s]
        if e.size == 0:
            continue
        bad = np.flatnonzero(e > limit)
        rates.append(1.0 if bad.size == 0 else bad[0] / e.size)
    return 100.0 * float(np.mean(rates)) if rates else float("nan")


@dataclass
class TrackScores:
    mte: float
    delta: float
    survival: float
    delta_per_threshold: list = field(default_factory=list)

    def as_tuple(self):
        return self.mte, self.delta, self.survival


def track_errors_3d(pred_positions, gt_positions) -> np.ndarray:
    """Per (track, timestep) Euclidean error in centimeters."""
    p, g = _pair(pred_positions, gt_positions)
    if p.ndim != 3 or p.shape[-1] != 3:
        raise InvalidParameterError("positions must be (tracks, timesteps, 3)")
    return 100.0 * np.linalg.norm(p - g, axis=-1)


def track_metrics_3d(pred, gt) -> TrackScores:
    """MTE (cm), delta (%) and survival (%) between matched 3D trajectories.

    ``pred``/``gt`` are TrackSets or ``(tracks, timesteps, 3)`` arrays in meters.
    """
    p = getattr(pred, "positions", pred)
    g = getattr(gt, "positions", gt)
    err = track_errors_3d(p, g)
    scored = np.ones(err.shape, bool)
    mte, delta, per = _threshold_stats(err, scored, THRESHOLDS)
    return TrackScores(mte, delta, _survival(err, scored, SURVIVAL_LIMIT), per)


def track_metrics_2d(pred_uv, gt_uv, gt_visible, image_width: int) -> TrackScores:
    """2D metrics on a canvas rescaled to 256 pixels wide; only GT-visible points are scored."""
    p, g = _pair(pred_uv, gt_uv)
    vis = np.asarray(gt_visible, dtype=bool)
    if p.ndim != 3 or p.shape[-1] != 2 or vis.shape != p.shape[:2]:
        raise InvalidParameterError("uv must be (tracks, timesteps, 2) with matching visibility")
    err = np.linalg.norm(p - g, axis=-1) * (CANVAS_WIDTH / image_width)
    mte, delta, per = _threshold_stats(err, vis, THRESHOLDS)
    return TrackScores(mte, delta, _survival(err, vis, SURVIVAL_LIMIT), per)


@dataclass
class MetricReport:
    sequence: str
    psnr: float
    ssim: float
    mte_3d: float
    delta_3d: float
    survival_3d: float
    mte_2d: float
    delta_2d: float
    survival_2d: float
    psnr_per_timestep: list = field(default_factory=list)
    delta_3d_per_threshold: list = field(default_factory=list)
    delta_2d_per_threshold: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


TABLE_COLUMNS = ("sequence", "PSNR", "SSIM", "MTE_3D_cm", "delta_3D", "survival_3D", "MTE_2D",
                 "delta_2D", "survival_2D")


def mean_report(reports) -> dict:
    keys = ("psnr", "ssim", "mte_3d", "delta_3d", "survival_3d", "mte_2d", "delta_2d", "survival_2d")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def write_table(reports, path) -> None:
    """Summary CSV: one row per sequence plus a mean row. LPIPS is not reported."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TABLE_COLUMNS)
        rows = [(r.sequence, r.to_dict()) for r in reports] + [("mean", mean_report(reports))]
        for name, d in rows:
            w.writerow([name] + [f"{d[k]:.6g}" for k in ("psnr", "ssim", "mte_3d", "delta_3d", "survival_3d",
                                                         "mte_2d", "delta_2d", "survival_2d")])


def write_report(reports, path) -> None:
    data = {"sequences": [r.to_dict() for r in reports], "mean": mean_report(reports)}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
