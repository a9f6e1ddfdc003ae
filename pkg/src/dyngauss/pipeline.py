"""End-to-end helpers shared by the CLI, the demos and the acceptance run:
train on a dataset directory, then score renders and tracks against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianScene
from .metrics import MetricReport, psnr, ssim, track_metrics_2d, track_metrics_3d
from .optimize import RunConfig, apply_color_calibration
from .rasterizer import rasterize
from .synthetic import GroundTruthTracks
from .tracking import TrackSet, track_pixel_2d, track_points


def desk_scale_config(**overrides) -> RunConfig:
    """Iteration budget and densification tuned for the 64x64 synthetic scenes.

    Nested dicts in ``overrides`` (``lr``, ``weights``, ``densify``) are merged
    into the preset rather than replacing it.
    """
    cfg = {"first_frame_iterations": 1500, "timestep_iterations": 300,
           "densify": {"start": 300, "stop": 900, "grad_threshold": 5e-3, "split_scale_fraction": 0.05},
           "lr": {"position_timestep": 1e-3}}
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    return RunConfig.from_dict(cfg)


@dataclass
class Evaluation:
    report: MetricReport
    tracks_3d: TrackSet
    uv_2d: np.ndarray
    visible_2d: np.ndarray


def render_view(scene: GaussianScene, dataset, name: str, t: int, calibration: dict | None = None):
    cam = dataset.camera(name, t)
    out = rasterize(scene, t, cam, dataset.background)
    if calibration and name in calibration:
        scale, offset = calibration[name]
        out.color = apply_color_calibration(out.color, scale, offset)
    return out


def image_metrics(scene: GaussianScene, dataset, cameras, calibration=None):
    """Per-timestep mean PSNR and SSIM over ``cameras``."""
    ps, ss = [], []
    for t in range(scene.timesteps):
        p_t, s_t = [], []
        for name in cameras:
            img = np.clip(render_view(scene, dataset, name, t, calibration).color, 0.0, 1.0)
            target = dataset.image(name, t)
            p_t.append(psnr(img, target))
            s_t.append(ssim(img, target))
        ps.append(float(np.mean(p_t)))
        ss.append(float(np.mean(s_t)))
    return ps, ss


def predict_2d(scene: GaussianScene, dataset, gt: GroundTruthTracks):
    """Track every GT 2D query pixel through the fitted scene in its own camera."""
    m = gt.uv.shape[0]
    steps = min(gt.uv.shape[1], scene.timesteps)
    uv = np.zeros((m, steps, 2))
    vis = np.zeros((m, steps), bool)
    renders = {}
    for k in range(m):
        cam = dataset.camera(gt.query_camera[k], 0)
        res = track_pixel_2d(scene, cam, gt.query_pixel[k], 0, [cam], range(steps), renders)
        if res.ok:
            uv[k], vis[k] = res.projections[cam.name]
        else:
            # rejected query: report the query pixel as a stationary prediction
            uv[k] = gt.query_pixel[k]
    return uv, vis


def evaluate(scene: GaussianScene, dataset, gt: GroundTruthTracks, calibration=None,
             test_cameras=None, sequence: str = "synthetic") -> Evaluation:
    steps = min(scene.timesteps, gt.tracks_3d.timesteps)
    cams = dataset.test_cameras if test_cameras is None else test_cameras
    ps, ss = image_metrics(scene, dataset, cams, calibration) if cams else ([float("nan")], [float("nan")])
    pred = track_points(scene, gt.tracks_3d.positions[:, 0], 0)
    s3 = track_metrics_3d(pred.positions[:, :steps], gt.tracks_3d.positions[:, :steps])
    if gt.uv.shape[0]:
        uv, vis = predict_2d(scene, dataset, gt)
        width = dataset.camera(gt.query_camera[0], 0).width
        s2 = track_metrics_2d(uv[:, :steps], gt.uv[:, :steps], gt.visible[:, :steps], width)
    else:
        uv, vis = np.zeros((0, steps, 2)), np.zeros((0, steps), bool)
        s2 = track_metrics_3d(np.zeros((0, 1, 3)), np.zeros((0, 1, 3)))
    report = MetricReport(sequence, float(np.mean(ps)), float(np.mean(ss)), s3.mte, s3.delta, s3.survival,
                          s2.mte, s2.delta, s2.survival, psnr_per_timestep=ps,
                          delta_3d_per_threshold=s3.delta_per_threshold,
                          delta_2d_per_threshold=s2.delta_per_threshold)
    return Evaluation(report, pred, uv, vis)
