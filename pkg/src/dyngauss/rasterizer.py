"""Forward splatting rasterizer.

Gaussians are projected with the pinhole model, their covariances splatted
through the local affine approximation ``J W Sigma W^T J^T``, binned into
screen tiles, depth sorted per tile and alpha composited front to back.
Pixel ``(col, row)`` samples the continuous image plane at integer
coordinates ``(col, row)``.

Three per-pixel channels are composited with the same weights: color,
center depth and foreground probability.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .gaussians import CameraModel, GaussianScene, build_covariance, sigmoid

NEAR_PLANE = 0.01
EPS_PIX = 0.3
ALPHA_EPS = 1e-4
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
FAR_VALUE = 0.0
N_FEAT = 5  # r, g, b, depth, fg


class InconsistentStateError(RuntimeError):
    """Replay data no longer matches the scene/camera it was rendered from."""


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    cull_radius: float = 3.0
    near: float = NEAR_PLANE
    eps_pix: float = EPS_PIX
    alpha_eps: float = ALPHA_EPS
    alpha_min: float = ALPHA_MIN
    t_min: float = T_MIN


@dataclass
class SplattedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    fg_prob: float
    source_index: int


@dataclass
class Splats:
    """Batch of projected Gaussians plus the intermediates the backward pass needs."""
    mean2d: np.ndarray      # (n, 2)
    cov2d: np.ndarray       # (n, 2, 2), low-pass floor included
    conic: np.ndarray       # (n, 3): inverse covariance entries (a, b, c)
    depth: np.ndarray       # (n,)
    opacity: np.ndarray     # (n,)
    color: np.ndarray       # (n, 3)
    fg_prob: np.ndarray     # (n,)
    valid: np.ndarray       # (n,) bool, False when behind the near plane
    mu_cam: np.ndarray      # (n, 3)
    jac: np.ndarray         # (n, 2, 3)
    cov3d: np.ndarray       # (n, 3, 3)

    @property
    def n(self) -> int:
        return self.depth.shape[0]

    def features(self) -> np.ndarray:
        return np.ascontiguousarray(
            np.concatenate([self.color, self.depth[:, None], self.fg_prob[:, None]], axis=1))

    def __getitem__(self, i: int) -> SplattedGaussian:
        return SplattedGaussian(self.mean2d[i], self.cov2d[i], float(self.depth[i]),
                                float(self.opacity[i]), self.color[i], float(self.fg_prob[i]), int(i))


@dataclass
class Replay:
    splats: Splats
    point_list: np.ndarray
    tile_ranges: np.ndarray
    tiles_x: int
    tiles_y: int
    final_t: np.ndarray
    last_contrib: np.ndarray
    settings: RasterSettings
    fingerprint: bytes
    background: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-weighted center depth (not renormalized)
    fg: np.ndarray     # (H, W)
    alpha: np.ndarray  # (H, W)
    replay: Replay | None = field(default=None, repr=False)

    def normalized_depth(self, alpha_min: float = 0.5) -> np.ndarray:
        """Depth divided by accumulated alpha; NaN where alpha < ``alpha_min``."""
        out = np.full_like(self.depth, np.nan)
        ok = self.alpha >= alpha_min
        out[ok] = self.depth[ok] / self.alpha[ok]
        return out


# ----------------------------------------------------------------------------
# single-Gaussian geometry
# ----------------------------------------------------------------------------

def project_mean(mu, camera: CameraModel, near: float = NEAR_PLANE):
    """Returns ``(mean2d, depth)``; ``mean2d`` is None when the point is culled."""
    mu_cam = camera.rotation @ np.asarray(mu, dtype=np.float64) + camera.translation
    z = float(mu_cam[2])
    if z <= near:
        return None, z
    return np.array([camera.fx * mu_cam[0] / z + camera.cx, camera.fy * mu_cam[1] / z + camera.cy]), z


def projection_jacobian(mu_cam, camera: CameraModel, near: float = NEAR_PLANE):
    """d(u, v)/d(x, y, z) in camera coordinates, or None behind the near plane."""
    x, y, z = np.asarray(mu_cam, dtype=np.float64)
    if z <= near:
        return None
    return np.array([[camera.fx / z, 0.0, -camera.fx * x / (z * z)],
                     [0.0, camera.fy / z, -camera.fy * y / (z * z)]])


def splat_covariance(cov3d, camera: CameraModel, mu_cam, eps_pix: float = EPS_PIX,
                     near: float = NEAR_PLANE):
    jac = projection_jacobian(mu_cam, camera, near)
    if jac is None:
        return None
    t = jac @ camera.rotation
    return t @ np.asarray(cov3d, dtype=np.float64) @ t.T + eps_pix ** 2 * np.eye(2)


# ----------------------------------------------------------------------------
# batched preprocessing
# ----------------------------------------------------------------------------

def project_gaussians(centers, rotations, log_scales, colors, opacity_logits, bg_logits,
                      camera: CameraModel, settings: RasterSettings = RasterSettings()) -> Splats:
    centers = np.asarray(centers, dtype=np.float64)
    w = camera.rotation
    mu_cam = centers @ w.T + camera.translation
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    valid = z > settings.near
    zs = np.where(valid, z, 1.0)
    mean2d = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    n = centers.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * x / (zs * zs)
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * y / (zs * zs)
    cov3d = build_covariance(log_scales, rotations) if n else np.zeros((0, 3, 3))
    tm = jac @ w
    cov2d = tm @ cov3d @ np.swapaxes(tm, 1, 2)
    cov2d[:, 0, 0] += settings.eps_pix ** 2
    cov2d[:, 1, 1] += settings.eps_pix ** 2
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d[~valid] = np.nan
    return Splats(mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z, opacity=sigmoid(opacity_logits),
                  color=np.asarray(colors, dtype=np.float64), fg_prob=sigmoid(bg_logits),
                  valid=valid, mu_cam=mu_cam, jac=jac, cov3d=cov3d)


def splat_scene(scene: GaussianScene, t: int, camera: CameraModel,
                settings: RasterSettings = RasterSettings()) -> Splats:
    scene.check_timestep(t)
    return project_gaussians(scene.centers[t], scene.rotations[t], scene.log_scales, scene.colors,
                             scene.opacity_logits, scene.bg_logits, camera, settings)


def tile_grid(width: int, height: int, tile_size: int) -> tuple[int, int]:
    return -(-width // tile_size), -(-height // tile_size)


def depth_sort_and_cull(splats: Splats, width: int, height: int, tile_size: int = 16,
                        cull_radius: float = 3.0):
    """Bin splats into tiles and sort each tile front to back.

    A Gaussian goes to every tile overlapped by the bounding box of its
    ``cull_radius``-sigma ellipse (``inf`` assigns it to all tiles). Within a
    tile, order is ascending center depth, ties broken by ascending index.

    Returns ``(point_list, tile_ranges, tiles_x, tiles_y)``.
    """
    tiles_x, tiles_y = tile_grid(width, height, tile_size)
    n_tiles = tiles_x * tiles_y
    idx = np.flatnonzero(splats.valid)
    if idx.size == 0:
        return np.zeros(0, np.int64), np.zeros((n_tiles, 2), np.int64), tiles_x, tiles_y
    mean = splats.mean2d[idx]
    with np.errstate(invalid="ignore", over="ignore"):
        hx = cull_radius * np.sqrt(splats.cov2d[idx, 0, 0])
        hy = cull_radius * np.sqrt(splats.cov2d[idx, 1, 1])
        x0 = np.clip(np.ceil((mean[:, 0] - hx - (tile_size - 1)) / tile_size), -1, tiles_x)
        x1 = np.clip(np.floor((mean[:, 0] + hx) / tile_size), -1, tiles_x)
        y0 = np.clip(np.ceil((mean[:, 1] - hy - (tile_size - 1)) / tile_size), -1, tiles_y)
        y1 = np.clip(np.floor((mean[:, 1] + hy) / tile_size), -1, tiles_y)
    if not math.isfinite(cull_radius):
        x0[:], y0[:], x1[:], y1[:] = 0, 0, tiles_x - 1, tiles_y - 1
    x0 = np.maximum(x0, 0).astype(np.int64)
    y0 = np.maximum(y0, 0).astype(np.int64)
    x1 = np.minimum(x1, tiles_x - 1).astype(np.int64)
    y1 = np.minimum(y1, tiles_y - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(idx.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[owner] + local % np.maximum(nx[owner], 1)
    ty = y0[owner] + local // np.maximum(nx[owner], 1)
    tile_id = ty * tiles_x + tx
    gid = idx[owner]
    order = np.lexsort((gid, splats.depth[gid], tile_id))
    point_list = gid[order]
    tile_sorted = tile_id[order]
    starts = np.searchsorted(tile_sorted, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_sorted, np.arange(n_tiles), side="right")
    return point_list.astype(np.int64), np.stack([starts, ends], axis=1).astype(np.int64), tiles_x, tiles_y


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------

def fingerprint(scene: GaussianScene, t: int, camera: CameraModel) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for arr in (scene.centers[t], scene.rotations[t], scene.log_scales, scene.colors,
                scene.opacity_logits, scene.bg_logits, camera.extrinsic,
                np.array([camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height])):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


def composite(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
              settings: RasterSettings = RasterSettings()) -> RenderOutput:
    """Tile-binned compositing of already projected splats."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    point_list, tile_ranges, tiles_x, tiles_y = depth_sort_and_cull(
        splats, width, height, settings.tile_size, settings.cull_radius)
    feats = splats.features()
    out_feat = np.zeros((height, width, N_FEAT))
    out_t = np.ones((height, width))
    out_last = np.zeros((height, width), np.int64)
    if point_list.size:
        mean2d = np.ascontiguousarray(np.nan_to_num(splats.mean2d))
        _kernels.composite_forward(tile_ranges, point_list, mean2d, np.ascontiguousarray(splats.conic),
                                   np.ascontiguousarray(splats.opacity), feats, width, height,
                                   settings.tile_size, tiles_x, 1.0 - settings.alpha_eps,
                                   settings.alpha_min, settings.t_min, out_feat, out_t, out_last)
    color = out_feat[..., :3] + out_t[..., None] * background
    alpha = 1.0 - out_t
    depth = out_feat[..., 3]
    depth = np.where(alpha > 0, depth, FAR_VALUE)
    replay = Replay(splats, point_list, tile_ranges, tiles_x, tiles_y, out_t, out_last, settings,
                    b"", background)
    return RenderOutput(color=color, depth=depth, fg=out_feat[..., 4], alpha=alpha, replay=replay)


def rasterize(scene: GaussianScene, t: int, camera: CameraModel, background=(0.0, 0.0, 0.0),
              settings: RasterSettings = RasterSettings()) -> RenderOutput:
    """Render color, depth, foreground and alpha of timestep ``t`` seen by ``camera``."""
    splats = splat_scene(scene, t, camera, settings)
    out = composite(splats, camera.width, camera.height, background, settings)
    out.replay.fingerprint = fingerprint(scene, t, camera)
    return out


def composite_reference(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
                        settings: RasterSettings = RasterSettings()) -> RenderOutput:
    """Per-pixel brute-force compositor over every visible Gaussian, no tiles and no culling.

    Deliberately written as plain scalar loops; used as the oracle for
    :func:`composite`.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    order = [int(i) for i in np.flatnonzero(splats.valid)]
    order.sort(key=lambda i: (float(splats.depth[i]), i))
    feats = splats.features()
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    fg = np.zeros((height, width))
    alpha_img = np.zeros((height, width))
    alpha_max = 1.0 - settings.alpha_eps
    rows = [(float(splats.mean2d[g, 0]), float(splats.mean2d[g, 1]), float(splats.conic[g, 0]),
             float(splats.conic[g, 1]), float(splats.conic[g, 2]), float(splats.opacity[g]),
             [float(v) for v in feats[g]]) for g in order]
    for py in range(height):
        for px in range(width):
            trans = 1.0
            acc = [0.0] * N_FEAT
            for mx, my, ca, cb, cc, op, f in rows:
                dx = mx - px
                dy = my - py
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    continue
                a = min(alpha_max, op * math.exp(power))
                if a < settings.alpha_min:
                    continue
                w = a * trans
                for ch in range(N_FEAT):
                    acc[ch] += f[ch] * w
                trans = trans * (1.0 - a)
                if trans < settings.t_min:
                    break
            color[py, px] = np.array(acc[:3]) + trans * background
            alpha_img[py, px] = 1.0 - trans
            depth[py, px] = acc[3] if trans < 1.0 else FAR_VALUE
            fg[py, px] = acc[4]
    return RenderOutput(color=color, depth=depth, fg=fg, alpha=alpha_img)
