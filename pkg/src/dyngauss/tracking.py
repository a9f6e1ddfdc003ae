"""Dense 6-DOF tracking through a fitted dynamic scene.

A query point is attached to the Gaussian with the highest influence on it
at the source timestep and then carried along that Gaussian's rigid motion.
Pixels are lifted to 3D through the rendered depth map first.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaussians import (CameraModel, GaussianScene, InvalidParameterError, influence_3d_all,
                        quat_multiply, quat_conjugate, quat_normalize, quat_to_rotmat)
from .rasterizer import RasterSettings, project_mean, rasterize

BACKGROUND = -1
INFLUENCE_MIN = 0.5
ALPHA_MIN = 0.5
OCCLUSION_TOL = 0.02  # meters
TRACK_FORMAT = "dyngauss-tracks"


@dataclass
class TrackSet:
    """``m`` tracks over ``timesteps`` frames.

    ``positions`` is ``(m, T, 3)``, ``rotations`` ``(m, T, 4)`` holds the
    anchor's rotation relative to the source timestep. ``projections`` maps a
    camera id to ``(uv (m, T, 2), visible (m, T))``.
    """
    anchors: np.ndarray
    source_t: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    projections: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.positions.shape[0]

    @property
    def timesteps(self) -> int:
        return self.positions.shape[1]

    def subset(self, idx) -> "TrackSet":
        return TrackSet(self.anchors[idx], self.source_t[idx], self.positions[idx], self.rotations[idx],
                        {c: (uv[idx], vis[idx]) for c, (uv, vis) in self.projections.items()})

    def to_json(self) -> dict:
        cams = sorted(self.projections)
        tracks = []
        for k in range(self.m):
            rows = []
            for t in range(self.timesteps):
                x, y, z = (float(v) for v in self.positions[k, t])
                qw, qx, qy, qz = (float(v) for v in self.rotations[k, t])
                row = {"t": t, "x": x, "y": y, "z": z, "qw": qw, "qx": qx, "qy": qy, "qz": qz}
                if cams:
                    row["proj"] = {c: [float(self.projections[c][0][k, t, 0]),
                                       float(self.projections[c][0][k, t, 1]),
                                       bool(self.projections[c][1][k, t])] for c in cams}
                rows.append(row)
            tracks.append({"source_t": int(self.source_t[k]), "anchor": int(self.anchors[k]), "rows": rows})
        return {"format": TRACK_FORMAT, "version": 1, "timesteps": self.timesteps, "cameras": cams,
                "tracks": tracks}

    @classmethod
    def from_json(cls, data: dict) -> "TrackSet":
        if data.get("format") != TRACK_FORMAT:
            raise InvalidParameterError("not a track file")
        steps, cams, tracks = data["timesteps"], data.get("cameras", []), data["tracks"]
        m = len(tracks)
        pos = np.zeros((m, steps, 3))
        rot = np.zeros((m, steps, 4))
        proj = {c: (np.zeros((m, steps, 2)), np.zeros((m, steps), bool)) for c in cams}
        for k, tr in enumerate(tracks):
            for row in tr["rows"]:
                t = row["t"]
                pos[k, t] = (row["x"], row["y"], row["z"])
                rot[k, t] = (row["qw"], row["qx"], row["qy"], row["qz"])
                for c in cams:
                    u, v, vis = row["proj"][c]
                    proj[c][0][k, t] = (u, v)
                    proj[c][1][k, t] = vis
        return cls(np.array([tr["anchor"] for tr in tracks], dtype=np.int64),
                   np.array([tr["source_t"] for tr in tracks], dtype=np.int64), pos, rot, proj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrackSet":
        return cls.from_json(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------
# 3D
# ----------------------------------------------------------------------------

def most_influential_gaussians(scene: GaussianScene, t: int, points, fg_threshold: float = 0.5,
                               chunk: int = 256) -> np.ndarray:
    """Anchor id per point, or ``BACKGROUND`` when no foreground influence reaches 0.5."""
    scene.check_timestep(t)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fg = np.flatnonzero(scene.foreground_mask(fg_threshold))
    out = np.full(points.shape[0], BACKGROUND, dtype=np.int64)
    if fg.size == 0:
        return out
    sub = scene.select(fg)
    for s in range(0, points.shape[0], chunk):
        infl = influence_3d_all(sub, t, points[s:s + chunk])
        best = np.argmax(infl, axis=1)  # first maximum, i.e. lowest index on ties
        hit = infl[np.arange(best.size), best] >= INFLUENCE_MIN
        out[s:s + chunk] = np.where(hit, fg[best], BACKGROUND)
    return out


def most_influential_gaussian(scene: GaussianScene, t: int, p, fg_threshold: float = 0.5) -> int:
    return int(most_influential_gaussians(scene, t, np.asarray(p)[None], fg_threshold)[0])


def relative_rotation(scene: GaussianScene, anchor: int, t_src: int, t_dst: int) -> np.ndarray:
    """``R_dst R_src^-1`` of the anchor as a 3x3 matrix (identity for the background)."""
    if anchor == BACKGROUND:
        return np.eye(3)
    return quat_to_rotmat(scene.rotations[t_dst][anchor]) @ quat_to_rotmat(scene.rotations[t_src][anchor]).T


def track_point(scene: GaussianScene, p, t_src: int, t_dst: int, anchor: int | None = None):
    """Carry ``p`` from ``t_src`` to ``t_dst``; returns ``(p', delta_R)``."""
    scene.check_timestep(t_src)
    scene.check_timestep(t_dst)
    p = np.asarray(p, dtype=np.float64)
    if anchor is None:
        anchor = most_influential_gaussian(scene, t_src, p)
    if anchor == BACKGROUND:
        return p.copy(), np.eye(3)
    dr = relative_rotation(scene, anchor, t_src, t_dst)
    if t_dst == t_src:
        return p.copy(), dr
    return scene.centers[t_dst][anchor] + dr @ (p - scene.centers[t_src][anchor]), dr


def track_points(scene: GaussianScene, points, t_src: int = 0, anchors=None) -> TrackSet:
    """Track every point through all stored timesteps."""
    scene.check_timestep(t_src)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m, steps = points.shape[0], scene.timesteps
    if anchors is None:
        anchors = most_influential_gaussians(scene, t_src, points)
    anchors = np.asarray(anchors, dtype=np.int64)
    pos = np.repeat(points[:, None], steps, axis=1)
    rot = np.zeros((m, steps, 4))
    rot[..., 0] = 1.0
    fg = anchors != BACKGROUND
    if np.any(fg):
        a = anchors[fg]
        q_src = quat_normalize(scene.rotations[t_src][a])
        r_src = quat_to_rotmat(q_src)
        local = np.einsum("mji,mj->mi", r_src, points[fg] - scene.centers[t_src][a])
        for t in range(steps):
            if t == t_src:
                continue
            r_t = quat_to_rotmat(scene.rotations[t][a])
            pos[fg, t] = scene.centers[t][a] + np.einsum("mij,mj->mi", r_t, local)
            dq = quat_multiply(quat_normalize(scene.rotations[t][a]), quat_conjugate(q_src))
            rot[fg, t] = dq * np.where(dq[:, :1] < 0, -1.0, 1.0)
    return TrackSet(anchors, np.full(m, t_src, dtype=np.int64), pos, rot)


# ----------------------------------------------------------------------------
# pixels
# ----------------------------------------------------------------------------

def pixel_ray(camera: CameraModel, pixel):
    u, v = pixel
    return np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])


def camera_to_world(camera: CameraModel, p_cam):
    return camera.rotation.T @ (np.asarray(p_cam) - camera.translation)


def unproject_pixel(scene: GaussianScene, t: int, camera: CameraModel, pixel, render=None,
                    settings: RasterSettings = RasterSettings()):
    """World point seen at integer ``pixel = (col, row)``, or None where alpha < 0.5."""
    col, row = int(pixel[0]), int(pixel[1])
    if not (0 <= col < camera.width and 0 <= row < camera.height):
        raise InvalidParameterError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    if render is None:
        render = rasterize(scene, t, camera, settings=settings)
    alpha = render.alpha[row, col]
    if alpha < ALPHA_MIN:
        return None
    d = render.depth[row, col] / alpha
    return camera_to_world(camera, d * pixel_ray(camera, (col, row)))


def _project_many(points, camera: CameraModel):
    pc = points @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    uv = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)
    return uv, z, ok


def visibility(points, camera: CameraModel, render, tol: float = OCCLUSION_TOL):
    """In-frame and depth-test visibility of world points against a rendered view."""
    uv, z, ok = _project_many(np.asarray(points, dtype=np.float64).reshape(-1, 3), camera)
    col = np.round(uv[:, 0]).astype(np.int64)
    row = np.round(uv[:, 1]).astype(np.int64)
    ok &= (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    vis = np.zeros(len(z), bool)
    cc, rr = col[ok], row[ok]
    alpha = render.alpha[rr, cc]
    depth = np.divide(render.depth[rr, cc], alpha, out=np.full(alpha.shape, np.inf), where=alpha >= ALPHA_MIN)
    vis[ok] = np.abs(depth - z[ok]) <= tol
    return uv, vis


@dataclass
class PixelTrack:
    ok: bool
    reason: str = ""
    anchor: int = BACKGROUND
    positions: np.ndarray | None = None       # (T, 3)
    projections: dict = field(default_factory=dict)  # camera id -> (uv (T, 2), visible (T,))


def track_pixel_2d(scene: GaussianScene, camera_src: CameraModel, pixel, t_src: int, cameras_dst,
                   timesteps=None, renders: dict | None = None) -> PixelTrack:
    """Unproject ``pixel``, anchor it, track it and reproject into each destination camera.

    ``renders`` may hold precomputed ``(camera name, t) -> RenderOutput``.
    """
    renders = {} if renders is None else renders

    def get_render(cam, t):
        key = (cam.name, t)
        if key not in renders:
            renders[key] = rasterize(scene, t, cam)
        return renders[key]

    p = unproject_pixel(scene, t_src, camera_src, pixel, get_render(camera_src, t_src))
    if p is None:
        return PixelTrack(False, "source pixel has alpha below 0.5")
    steps = list(range(scene.timesteps)) if timesteps is None else list(timesteps)
    ts = track_points(scene, p[None], t_src)
    pos = ts.positions[0]
    out = PixelTrack(True, anchor=int(ts.anchors[0]), positions=pos[steps])
    for cam in cameras_dst:
        uv = np.zeros((len(steps), 2))
        vis = np.zeros(len(steps), bool)
        for k, t in enumerate(steps):
            uv_k, vis_k = visibility(pos[t][None], cam, get_render(cam, t))
            uv[k], vis[k] = uv_k[0], vis_k[0]
        out.projections[cam.name] = (uv, vis)
    return out


def project_tracks(tracks: TrackSet, cameras, renders) -> TrackSet:
    """Attach per-camera projections with depth-test visibility; ``renders[(name, t)]``."""
    for cam in cameras:
        uv = np.zeros((tracks.m, tracks.timesteps, 2))
        vis = np.zeros((tracks.m, tracks.timesteps), bool)
        for t in range(tracks.timesteps):
            uv[:, t], vis[:, t] = visibility(tracks.positions[:, t], cam, renders[(cam.name, t)])
        tracks.projections[cam.name] = (uv, vis)
    return tracks


def project_point(p, camera: CameraModel):
    mean2d, _ = project_mean(p, camera)
    return mean2d
