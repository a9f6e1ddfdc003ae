"""Analytic backward pass of the splatting rasterizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .gaussians import CameraModel, GaussianScene, quat_to_rotmat, quat_to_rotmat_vjp
from .rasterizer import N_FEAT, InconsistentStateError, RenderOutput, Replay, Splats, fingerprint


@dataclass
class ParamGradients:
    d_centers: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_colors: np.ndarray
    d_opacity_logits: np.ndarray
    d_bg_logits: np.ndarray
    d_color_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_color_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_mean2d: np.ndarray | None = None  # screen-space positional gradient, used by densification

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n), d_mean2d=np.zeros((n, 2)))

    def groups(self) -> dict:
        return {
            "centers": self.d_centers, "rotations": self.d_rotations,
            "log_scales": self.d_log_scales, "colors": self.d_colors,
            "opacity_logits": self.d_opacity_logits, "bg_logits": self.d_bg_logits,
            "color_scale": self.d_color_scale, "color_offset": self.d_color_offset,
        }

    def __iadd__(self, other: "ParamGradients") -> "ParamGradients":
        for name in ("d_centers", "d_rotations", "d_log_scales", "d_colors", "d_opacity_logits",
                     "d_bg_logits", "d_color_scale", "d_color_offset"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        if other.d_mean2d is not None:
            self.d_mean2d = other.d_mean2d if self.d_mean2d is None else self.d_mean2d + other.d_mean2d
        return self


@dataclass
class SplatGradients:
    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    feats: np.ndarray  # (n, 5): color, depth, fg


def backward_composite(replay: Replay, width: int, height: int, d_color=None, d_depth=None,
                       d_fg=None, d_alpha=None) -> SplatGradients:
    """Gradients w.r.t. splat quantities given gradients w.r.t. the rendered channels."""
    splats = replay.splats
    n = splats.n
    d_feat = np.zeros((height, width, N_FEAT))
    d_final_t = np.zeros((height, width))
    if d_color is not None:
        d_color = np.asarray(d_color, dtype=np.float64).reshape(height, width, 3)
        d_feat[..., :3] = d_color
        d_final_t += d_color @ replay.background
    if d_depth is not None:
        # pixels with alpha == 0 report the far value, which carries no gradient
        d_feat[..., 3] = np.asarray(d_depth, dtype=np.float64).reshape(height, width)
    if d_fg is not None:
        d_feat[..., 4] = np.asarray(d_fg, dtype=np.float64).reshape(height, width)
    if d_alpha is not None:
        d_final_t -= np.asarray(d_alpha, dtype=np.float64).reshape(height, width)
    slots = replay.point_list.size
    g_mean2d = np.zeros((slots, 2))
    g_conic = np.zeros((slots, 3))
    g_opacity = np.zeros(slots)
    g_feat = np.zeros((slots, N_FEAT))
    if slots:
        s = replay.settings
        _kernels.composite_backward(
            replay.tile_ranges, replay.point_list, np.ascontiguousarray(np.nan_to_num(splats.mean2d)),
            np.ascontiguousarray(splats.conic), np.ascontiguousarray(splats.opacity), splats.features(),
            width, height, s.tile_size, replay.tiles_x, 1.0 - s.alpha_eps, s.alpha_min,
            replay.final_t, replay.last_contrib, d_feat, d_final_t,
            g_mean2d, g_conic, g_opacity, g_feat)

    # fixed slot order (tile-major, depth within tile) keeps the reduction deterministic
    def reduce(values):
        return np.bincount(replay.point_list, weights=values, minlength=n)

    return SplatGradients(
        mean2d=np.stack([reduce(g_mean2d[:, k]) for k in range(2)], axis=1),
        conic=np.stack([reduce(g_conic[:, k]) for k in range(3)], axis=1),
        opacity=reduce(g_opacity),
        feats=np.stack([reduce(g_feat[:, k]) for k in range(N_FEAT)], axis=1),
    )


def backward_preprocess(splats: Splats, grads: SplatGradients, rotations, log_scales,
                        camera: CameraModel) -> ParamGradients:
    """Chain rule from splat quantities back to the Gaussian parameters."""
    n = splats.n
    valid = splats.valid
    x, y = splats.mu_cam[:, 0], splats.mu_cam[:, 1]
    z = np.where(valid, splats.mu_cam[:, 2], 1.0)
    fx, fy = camera.fx, camera.fy
    w = camera.rotation

    # conic (a, b, c) = inverse of cov2d; b appears twice in the quadratic form
    q = np.zeros((n, 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = (splats.conic[:, 0], splats.conic[:, 1],
                                                      splats.conic[:, 1], splats.conic[:, 2])
    g_q = np.zeros((n, 2, 2))
    g_q[:, 0, 0] = grads.conic[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * grads.conic[:, 1]
    g_q[:, 1, 1] = grads.conic[:, 2]
    g_cov2d = -q @ g_q @ q

    tm = splats.jac @ w
    g_cov3d = np.swapaxes(tm, 1, 2) @ g_cov2d @ tm
    g_tm = 2.0 * g_cov2d @ tm @ splats.cov3d
    g_jac = g_tm @ w.T

    g_mu_cam = np.zeros((n, 3))
    gu, gv = grads.mean2d[:, 0], grads.mean2d[:, 1]
    g_mu_cam[:, 0] = gu * fx / z - g_jac[:, 0, 2] * fx / (z * z)
    g_mu_cam[:, 1] = gv * fy / z - g_jac[:, 1, 2] * fy / (z * z)
    g_mu_cam[:, 2] = (-gu * fx * x / (z * z) - gv * fy * y / (z * z)
                      - g_jac[:, 0, 0] * fx / (z * z) + g_jac[:, 0, 2] * 2 * fx * x / (z ** 3)
                      - g_jac[:, 1, 1] * fy / (z * z) + g_jac[:, 1, 2] * 2 * fy * y / (z ** 3)
                      + grads.feats[:, 3])
    g_mu_cam[~valid] = 0.0
    d_centers = g_mu_cam @ w

    rot = quat_to_rotmat(rotations)
    s = np.exp(log_scales)
    m = rot * s[:, None, :]
    g_sym = 0.5 * (g_cov3d + np.swapaxes(g_cov3d, 1, 2))
    g_m = 2.0 * g_sym @ m
    g_m[~valid] = 0.0
    d_log_scales = np.sum(g_m * rot, axis=1) * s
    d_rotations = quat_to_rotmat_vjp(rotations, g_m * s[:, None, :])

    op = splats.opacity
    fg = splats.fg_prob
    d_mean2d = np.where(valid[:, None], grads.mean2d, 0.0)
    return ParamGradients(
        d_centers=d_centers,
        d_rotations=d_rotations,
        d_log_scales=d_log_scales,
        d_colors=grads.feats[:, :3],
        d_opacity_logits=grads.opacity * op * (1.0 - op),
        d_bg_logits=grads.feats[:, 4] * fg * (1.0 - fg),
        d_mean2d=d_mean2d,
    )


def backward_rasterize(scene: GaussianScene, t: int, camera: CameraModel, render_output: RenderOutput,
                       d_color=None, d_depth=None, d_fg=None, d_alpha=None) -> ParamGradients:
    """Gradients of a scalar loss w.r.t. all Gaussian parameters at timestep ``t``.

    ``d_*`` are the loss gradients w.r.t. the corresponding channels of
    ``render_output``; omitted channels contribute nothing.
    """
    replay = render_output.replay
    if replay is None:
        raise InconsistentStateError("render output carries no replay data")
    if replay.fingerprint != fingerprint(scene, t, camera):
        raise InconsistentStateError("scene or camera changed since this image was rendered")
    sg = backward_composite(replay, camera.width, camera.height, d_color, d_depth, d_fg, d_alpha)
    return backward_preprocess(replay.splats, sg, scene.rotations[t], scene.log_scales, camera)
