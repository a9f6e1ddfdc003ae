"""Finite-difference verification of the analytic gradients.

Every scalar parameter is perturbed by ``+-h`` and the central difference is
compared with the analytic gradient. Compositing has genuine
discontinuities (the 1/255 skip, the opacity clamp, early termination, depth
order, L1 sign changes); a parameter whose perturbation flips any of those
discrete decisions has no derivative to compare against, so it is counted
as a kink crossing and left out of the error statistic.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .backward import backward_rasterize
from .gaussians import CameraModel, GaussianScene, quat_from_rotvec
from .losses import image_loss
from .optimize import apply_color_calibration, color_calibration_vjp
from .priors import build_neighbor_graph, isometry_loss, rigidity_loss, rotation_loss
from .rasterizer import RasterSettings, RenderOutput, rasterize

STEP = 1e-5
TINY = 1e-8
RENDER_LOSSES = ("image", "channels")
PRIOR_LOSSES = ("rigid", "rot", "iso")
LOSSES = RENDER_LOSSES + PRIOR_LOSSES


def random_scene(rng: np.random.Generator, n: int = 5, timesteps: int = 1, depth=(1.5, 3.0),
                 spread: float = 0.35, scale=(0.03, 0.15), fg_fraction: float = 0.8) -> GaussianScene:
    """Random Gaussians in front of a camera at the origin looking down +z."""
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None]
    centers = np.concatenate([xy, z[:, None]], axis=1)
    rot = quat_from_rotvec(rng.normal(0.0, 1.0, (n, 3)))
    rot *= rng.uniform(0.5, 2.0, (n, 1))
    log_scales = np.log(rng.uniform(*scale, (n, 3)))
    bg = np.where(rng.random(n) < fg_fraction, rng.uniform(0.5, 3.0, n), rng.uniform(-3.0, -0.5, n))
    scene = GaussianScene([centers], [rot], log_scales, rng.uniform(0.05, 0.95, (n, 3)),
                          rng.uniform(-1.0, 2.0, n), bg)
    for _ in range(1, timesteps):
        prev_c, prev_q = scene.centers[-1], scene.rotations[-1]
        scene.append_timestep(prev_c + rng.normal(0.0, 0.01, (n, 3)),
                              prev_q + rng.normal(0.0, 0.05, (n, 4)))
    return scene


def default_camera(size: int = 16, fov_scale: float = 1.2) -> CameraModel:
    f = fov_scale * size
    return CameraModel(f, f, (size - 1) / 2.0, (size - 1) / 2.0, np.hstack([np.eye(3), np.zeros((3, 1))]),
                       size, size, name="gradcheck")


# ----------------------------------------------------------------------------
# losses expressed as (value, analytic gradient dict, discrete signature)
# ----------------------------------------------------------------------------

def _render_signature(out: RenderOutput) -> bytes:
    """Hash of every discrete decision the compositor made."""
    rp = out.replay
    s = rp.splats
    h = hashlib.blake2b(digest_size=16)
    h.update(rp.point_list.tobytes())
    h.update(rp.last_contrib.tobytes())
    width, height = rp.final_t.shape[1], rp.final_t.shape[0]
    ts = rp.settings.tile_size
    alpha_max = 1.0 - rp.settings.alpha_eps
    for tile, (start, end) in enumerate(rp.tile_ranges):
        if end <= start:
            continue
        ty, tx = divmod(tile, rp.tiles_x)
        cols = np.arange(tx * ts, min((tx + 1) * ts, width))
        rows = np.arange(ty * ts, min((ty + 1) * ts, height))
        px, py = np.meshgrid(cols, rows)
        ids = rp.point_list[start:end]
        dx = s.mean2d[ids, 0][:, None, None] - px
        dy = s.mean2d[ids, 1][:, None, None] - py
        a, b, c = (s.conic[ids, k][:, None, None] for k in range(3))
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = s.opacity[ids][:, None, None] * np.exp(np.minimum(power, 0.0))
        flags = ((power > 0) * 1 + (alpha < rp.settings.alpha_min) * 2 + (alpha > alpha_max) * 4)
        h.update(flags.astype(np.uint8).tobytes())
    return h.digest()


@dataclass
class _Problem:
    """Packs the parameters of one loss so they can be perturbed by flat index."""
    scene: GaussianScene
    camera: CameraModel
    loss: str
    t: int
    target: np.ndarray | None = None
    weights: dict = field(default_factory=dict)
    graph: object = None

    def groups(self) -> dict:
        sc, t = self.scene, self.t
        if self.loss in PRIOR_LOSSES:
            return {"centers": sc.centers[t], "rotations": sc.rotations[t]}
        g = {"centers": sc.centers[t], "rotations": sc.rotations[t], "log_scales": sc.log_scales,
             "colors": sc.colors, "opacity_logits": sc.opacity_logits, "bg_logits": sc.bg_logits}
        if self.loss == "image":
            g["color_scale"] = self.camera.color_scale
            g["color_offset"] = self.camera.color_offset
        return g

    def evaluate(self, want_grad: bool):
        sc, cam, t = self.scene, self.camera, self.t
        if self.loss in PRIOR_LOSSES:
            fn = {"rigid": rigidity_loss, "rot": rotation_loss, "iso": isometry_loss}[self.loss]
            val, d_mu, d_q = fn(sc, t, self.graph)
            return val, {"centers": d_mu, "rotations": d_q}, b""
        out = rasterize(sc, t, cam, settings=RasterSettings(tile_size=8))
        sig = _render_signature(out)
        if self.loss == "image":
            calibrated = apply_color_calibration(out.color, cam.color_scale, cam.color_offset)
            val, g = image_loss(calibrated, self.target)
            sig += np.signbit(calibrated - self.target).tobytes()
            if not want_grad:
                return val, None, sig
            d_color, d_scale, d_offset = color_calibration_vjp(out.color, cam.color_scale, g)
            pg = backward_rasterize(sc, t, cam, out, d_color=d_color)
            pg.d_color_scale, pg.d_color_offset = d_scale, d_offset
        else:
            w = self.weights
            val = float(np.sum(w["color"] * out.color) + np.sum(w["depth"] * out.depth)
                        + np.sum(w["fg"] * out.fg) + np.sum(w["alpha"] * out.alpha))
            if not want_grad:
                return val, None, sig
            pg = backward_rasterize(sc, t, cam, out, d_color=w["color"], d_depth=w["depth"],
                                    d_fg=w["fg"], d_alpha=w["alpha"])
        grads = {"centers": pg.d_centers, "rotations": pg.d_rotations, "log_scales": pg.d_log_scales,
                 "colors": pg.d_colors, "opacity_logits": pg.d_opacity_logits, "bg_logits": pg.d_bg_logits,
                 "color_scale": pg.d_color_scale, "color_offset": pg.d_color_offset}
        return val, grads, sig


@dataclass
class GroupResult:
    max_rel_err: float
    checked: int
    excluded_small: int
    excluded_kink: int

    def to_dict(self):
        return {"max_rel_err": self.max_rel_err, "checked": self.checked,
                "excluded_small": self.excluded_small, "excluded_kink": self.excluded_kink}


@dataclass
class GradcheckReport:
    loss: str
    seed: int
    step: float
    tolerance: float
    groups: dict
    no_coverage: bool

    @property
    def passed(self) -> bool:
        return all(g.max_rel_err < self.tolerance for g in self.groups.values() if g.checked)

    def to_dict(self) -> dict:
        return {"loss": self.loss, "seed": self.seed, "step": self.step, "tolerance": self.tolerance,
                "no_coverage": self.no_coverage, "passed": self.passed,
                "groups": {k: v.to_dict() for k, v in self.groups.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def gradcheck(scene: GaussianScene, camera: CameraModel | None = None, loss: str = "image", seed: int = 0,
              t: int | None = None, step: float = STEP, tolerance: float = 1e-4) -> GradcheckReport:
    """Compare analytic and central-difference gradients for every parameter of ``loss``.

    ``loss`` is one of ``image`` (L1/SSIM against a seeded random target with
    random color calibration), ``channels`` (seeded random linear functional
    of color, depth, foreground and alpha) or a prior: ``rigid``, ``rot``,
    ``iso`` (these need ``scene.timesteps >= 2``).
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    rng = np.random.default_rng(seed)
    scene = scene.copy()
    camera = default_camera() if camera is None else camera.with_extrinsic(camera.extrinsic.copy())
    t = (scene.timesteps - 1) if t is None else t
    problem = _Problem(scene, camera, loss, t)
    shape = (camera.height, camera.width)
    if loss == "image":
        problem.target = rng.uniform(0.0, 1.0, shape + (3,))
        camera.color_scale = rng.uniform(0.8, 1.2, 3)
        camera.color_offset = rng.uniform(-0.05, 0.05, 3)
    elif loss == "channels":
        problem.weights = {"color": rng.normal(size=shape + (3,)), "depth": rng.normal(size=shape),
                           "fg": rng.normal(size=shape), "alpha": rng.normal(size=shape)}
    else:
        k = min(20, int(scene.foreground_mask().sum()) - 1)
        problem.graph = build_neighbor_graph(scene, k=k, lambda_w=20.0)

    _, analytic, sig0 = problem.evaluate(True)
    results = {}
    for name, arr in problem.groups().items():
        flat = arr.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst, checked, small, kinks = 0.0, 0, 0, 0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp, _, sp = problem.evaluate(False)
            flat[j] = orig - step
            lm, _, sm = problem.evaluate(False)
            flat[j] = orig
            num = (lp - lm) / (2.0 * step)
            a = ana[j]
            if abs(a) < TINY and abs(num) < TINY:
                small += 1
                continue
            if sp != sig0 or sm != sig0:
                kinks += 1
                continue
            checked += 1
            worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
        results[name] = GroupResult(worst, checked, small, kinks)
    no_cov = all(g.checked == 0 and g.excluded_kink == 0 for g in results.values())
    return GradcheckReport(loss, seed, step, tolerance, results, no_cov)
