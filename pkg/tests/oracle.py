"""Small in-memory oracle datasets rendered from known scenes."""
import numpy as np

from dyngauss.dataset import CameraEntry, Dataset, PointCloud
from dyngauss.gaussians import CameraModel, GaussianScene, quat_from_rotvec
from dyngauss.rasterizer import rasterize


def ring_cameras(n, size=24, radius=1.2, f=None, target=(0, 0, 0), height=0.4):
    f = 1.1 * size if f is None else f
    out = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height + 0.15 * (k % 2)])
        cam = CameraModel.look_at(eye, target, [0, 0, 1], f, f, size, size, name=f"c{k:02d}")
        out.append(CameraEntry(cam.name, f, f, cam.cx, cam.cy, size, size, "train", cam.extrinsic))
    return out


def blob_scene(rng, n=20, spread=0.12, scale=0.06, opacity_logit=2.0):
    centers = rng.uniform(-spread, spread, (n, 3))
    return GaussianScene([centers], [quat_from_rotvec(rng.normal(0, 0.5, (n, 3)))],
                         np.log(rng.uniform(0.6, 1.0, (n, 3)) * scale), rng.uniform(0.1, 0.9, (n, 3)),
                         np.full(n, opacity_logit), np.full(n, 4.0))


def render_dataset(scene, entries, background=(0.0, 0.0, 0.0), init_points=None, init_colors=None,
                   calibration=None, test=(), with_masks=True):
    images, masks = {}, {}
    for e in entries:
        if e.id in test:
            e.split = "test"
        cam = e.model(0)
        scale, offset = (calibration or {}).get(e.id, (np.ones(3), np.zeros(3)))
        for t in range(scene.timesteps):
            out = rasterize(scene, t, cam, background)
            images[(e.id, t)] = out.color * scale + offset
            masks[(e.id, t)] = (out.fg >= 0.5).astype(float)
    pts = scene.centers[0] if init_points is None else init_points
    cols = scene.colors if init_colors is None else init_colors
    pc = PointCloud(np.asarray(pts, float), np.asarray(cols, float), np.ones(len(pts), bool))
    return Dataset.from_arrays(entries, images, masks if with_masks else None, pc, background)
