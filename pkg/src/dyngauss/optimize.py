"""Online optimization driver.

Timestep 0 is a static fit of every parameter (with densification and
per-camera color calibration). Every later timestep starts from a forward
extrapolation of the previous two poses, resets the Adam moments and updates
only centers and rotations under the image, rigidity, rotation, isometry and
background losses.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .backward import ParamGradients, backward_rasterize
from .gaussians import (GaussianScene, InvalidCallError, logit, quat_multiply, quat_conjugate,
                        quat_normalize)
from .losses import image_loss
from .priors import (ConfigurationError, NeighborGraph, build_neighbor_graph, immobility_loss,
                     isometry_loss, rigidity_loss, rotation_loss, segmentation_loss)
from .rasterizer import RasterSettings, rasterize

log = logging.getLogger(__name__)

STATIC_GROUPS = ("log_scales", "colors", "opacity_logits", "bg_logits")


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class LearningRates:
    position: float = 1.6e-4        # multiplied by the scene extent
    position_final: float = 1.6e-6  # end of the frame-0 exponential decay, also x extent
    position_timestep: float | None = None  # constant rate for t >= 1, x extent; None reuses ``position``
    rotation: float = 1e-3
    log_scale: float = 5e-3
    color: float = 2.5e-3
    opacity: float = 5e-2
    bg_logit: float = 5e-2
    color_calibration: float = 1e-3


@dataclass
class LossWeights:
    image: float = 1.0
    rigid: float = 4.0
    rot: float = 4.0
    iso: float = 2.0
    seg: float = 3.0
    seg_timestep: float | None = None  # segmentation weight for t >= 1; None reuses ``seg``
    immobility: float = 20.0


@dataclass
class DensifyConfig:
    enabled: bool = True
    start: int = 500
    stop: int = 5000
    interval: int = 100
    grad_threshold: float = 2e-4      # mean |dL/d mean2d| in normalized device coordinates
    min_opacity: float = 0.005
    split_scale_fraction: float = 0.01  # of scene extent
    split_factor: float = 1.6


@dataclass
class RunConfig:
    first_frame_iterations: int = 10000
    timestep_iterations: int = 2000
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed: int = 0
    train_cameras: list | None = None   # camera names; None uses the dataset's train split
    tile_size: int = 16
    cull_radius: float = 3.0
    dssim_weight: float = 0.2
    forward_propagation: str = "linear"  # "linear", "relative" or "none"
    fix_static: bool = True
    init_opacity: float = 0.1
    knn: int = 20
    lambda_w: float = 2000.0
    max_timesteps: int | None = None

    def __post_init__(self):
        for name, cls in (("lr", LearningRates), ("weights", LossWeights), ("densify", DensifyConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        if self.first_frame_iterations < 0 or self.timestep_iterations < 0:
            raise ConfigurationError("iteration counts must be non-negative")
        if self.forward_propagation not in ("linear", "relative", "none"):
            raise ConfigurationError(f"unknown forward_propagation {self.forward_propagation!r}")

    @property
    def raster(self) -> RasterSettings:
        return RasterSettings(tile_size=self.tile_size, cull_radius=self.cull_radius)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments for named parameter groups (rows are per-Gaussian where applicable)."""
    lrs: dict
    weights: LossWeights
    budgets: tuple = (10000, 2000)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    def reset(self, params: dict) -> None:
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr_override: dict | None = None) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.step_count
        corr2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            lr = (lr_override or {}).get(name, self.lrs[name])
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)

    def remap_rows(self, origin: np.ndarray, row_groups) -> None:
        """Reindex per-Gaussian moments after densification; ``origin == -1`` rows start at zero."""
        for name in row_groups:
            for store in (self.m, self.v):
                old = store[name]
                new = np.zeros((origin.size,) + old.shape[1:])
                keep = origin >= 0
                new[keep] = old[origin[keep]]
                store[name] = new


# ----------------------------------------------------------------------------
# color calibration
# ----------------------------------------------------------------------------

def apply_color_calibration(image, scale, offset):
    """Per-channel affine ``scale * image + offset``."""
    return np.asarray(image) * np.asarray(scale) + np.asarray(offset)


def color_calibration_vjp(image, scale, d_out):
    """Gradients w.r.t. (image, scale, offset) of the affine calibration."""
    d_out = np.asarray(d_out)
    return d_out * scale, np.sum(d_out * image, axis=(0, 1)), np.sum(d_out, axis=(0, 1))


# ----------------------------------------------------------------------------
# initialization, densification, forward propagation
# ----------------------------------------------------------------------------

def init_scene_from_point_cloud(points, colors, fg=None, init_opacity: float = 0.1) -> GaussianScene:
    """One isotropic Gaussian per point, sized from its 3 nearest neighbors."""
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise ConfigurationError("empty initial point cloud")
    if n > 1:
        kq = min(4, n)
        dist, _ = cKDTree(points).query(points, k=kq)
        d2 = np.mean(dist[:, 1:] ** 2, axis=1)
        d2 = np.maximum(d2, 1e-7)
    else:
        d2 = np.full(1, 1e-2)
    log_scales = np.repeat(0.5 * np.log(d2)[:, None], 3, axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    fg = np.ones(n, bool) if fg is None else np.asarray(fg, bool)
    bg_logits = np.where(fg, 2.0, -2.0)
    return GaussianScene([points.copy()], [rotations], log_scales,
                         np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0),
                         np.full(n, float(logit(init_opacity))), bg_logits)


def densify_and_prune(scene: GaussianScene, grad_accum, grad_count, config: DensifyConfig,
                      extent: float, rng: np.random.Generator):
    """Clone/split high-gradient Gaussians and drop transparent ones.

    Returns ``(new_scene, origin)`` where ``origin[i]`` is the index of the
    pre-existing Gaussian whose optimizer state row ``i`` inherits, or -1.
    """
    if scene.timesteps != 1:
        raise InvalidCallError("densification only runs during the first-frame fit")
    n = scene.n
    mean_grad = np.divide(grad_accum, grad_count, out=np.zeros(n), where=grad_count > 0)
    hot = mean_grad >= config.grad_threshold
    max_scale = np.max(scene.scales, axis=1)
    split_limit = config.split_scale_fraction * extent
    clone = hot & (max_scale <= split_limit)
    split = hot & (max_scale > split_limit)

    centers, rots = scene.centers[0], scene.rotations[0]
    parts_idx = [np.flatnonzero(~split), np.flatnonzero(clone)]
    new_centers = [centers[~split], centers[clone]]
    new_log_scales = [scene.log_scales[~split], scene.log_scales[clone]]
    origin = [np.flatnonzero(~split), np.full(int(clone.sum()), -1)]
    split_idx = np.flatnonzero(split)
    if split_idx.size:
        cov = scene.covariances(0)[split_idx]
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
        for _ in range(2):
            z = rng.standard_normal((split_idx.size, 3))
            new_centers.append(centers[split_idx] + np.einsum("nab,nb->na", chol, z))
            new_log_scales.append(scene.log_scales[split_idx] - math.log(config.split_factor))
            parts_idx.append(split_idx)
            origin.append(np.full(split_idx.size, -1))
    src = np.concatenate(parts_idx)
    out = GaussianScene([np.concatenate(new_centers)], [rots[src]], np.concatenate(new_log_scales),
                        scene.colors[src], scene.opacity_logits[src], scene.bg_logits[src])
    origin = np.concatenate(origin)
    keep = out.opacities >= config.min_opacity
    return out.select(keep), origin[keep]


def forward_propagate_init(scene: GaussianScene, t: int, mode: str = "linear"):
    """Initial ``(centers, rotations)`` for timestep ``t`` from the previous two."""
    if t < 1:
        raise InvalidCallError("forward propagation needs t >= 1")
    if t > scene.timesteps:
        raise IndexError(f"timestep {t - 1} has not been fitted yet")
    mu1, q1 = scene.centers[t - 1], scene.rotations[t - 1]
    if t == 1 or mode == "none":
        return mu1.copy(), q1.copy()
    mu2, q2 = scene.centers[t - 2], scene.rotations[t - 2]
    mu = mu1 + (mu1 - mu2)
    u1, u2 = quat_normalize(q1), quat_normalize(q2)
    if mode == "relative":
        q = quat_multiply(u1, quat_multiply(quat_conjugate(u2), u1))
        return mu, quat_normalize(q)
    u2 = np.where(np.sum(u1 * u2, axis=1, keepdims=True) < 0, -u2, u2)
    q = 2.0 * u1 - u2
    same = np.all(u1 == u2, axis=1, keepdims=True)
    return mu, np.where(same, u1, quat_normalize(q))


# ----------------------------------------------------------------------------
# fitting
# ----------------------------------------------------------------------------

@dataclass
class FitStats:
    timestep: int
    iterations: int
    losses: list = field(default_factory=list)
    regressions: int = 0


class ProgressLog:
    """Per-iteration loss rows, written as CSV."""
    columns = ("timestep", "iteration", "camera", "total", "image", "seg", "rigid", "rot", "iso",
               "immobility", "n_gaussians")

    def __init__(self):
        self.rows = []

    def add(self, **row):
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.columns)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row.get(k, "") for k in self.columns})


class _ViewSampler:
    """Shuffled epochs over training cameras, deterministic under the seed."""

    def __init__(self, names, seed: int, t: int):
        self.names = list(names)
        self.rng = np.random.default_rng([seed, t])
        self.queue = []

    def next(self):
        if not self.queue:
            self.queue = [self.names[i] for i in self.rng.permutation(len(self.names))]
        return self.queue.pop()


def _train_camera_names(dataset, config: RunConfig):
    names = config.train_cameras if config.train_cameras is not None else dataset.train_cameras
    if not names:
        raise ConfigurationError("no training cameras")
    return list(names)


def _render_terms(scene, t, dataset, name, config, calibration, seg_weight=None):
    """Image (+segmentation) loss on one view; returns (losses dict, ParamGradients, d_scale, d_offset)."""
    cam = dataset.camera(name, t)
    out = rasterize(scene, t, cam, dataset.background, config.raster)
    scale, offset = calibration[name]
    calibrated = apply_color_calibration(out.color, scale, offset)
    target = dataset.image(name, t)
    l_img, g_img = image_loss(calibrated, target, config.dssim_weight)
    w = config.weights
    d_color, d_scale, d_offset = color_calibration_vjp(out.color, scale, w.image * g_img)
    losses = {"image": l_img, "seg": 0.0}
    d_fg = None
    seg_weight = w.seg if seg_weight is None else seg_weight
    mask = dataset.mask(name, t) if seg_weight > 0 else None
    if mask is not None:
        l_seg, g_seg = segmentation_loss(out.fg, mask)
        losses["seg"] = l_seg
        d_fg = seg_weight * g_seg
    grads = backward_rasterize(scene, t, cam, out, d_color=d_color, d_fg=d_fg)
    grads.d_color_scale = d_scale
    grads.d_color_offset = d_offset
    return losses, grads, out


def _params_t0(scene, calib_scale, calib_offset):
    return {
        "centers": scene.centers[0], "rotations": scene.rotations[0], "log_scales": scene.log_scales,
        "colors": scene.colors, "opacity_logits": scene.opacity_logits, "bg_logits": scene.bg_logits,
        "color_scale": calib_scale, "color_offset": calib_offset,
    }


def _lr_table(config: RunConfig, extent: float) -> dict:
    lr = config.lr
    return {"centers": lr.position * extent, "rotations": lr.rotation, "log_scales": lr.log_scale,
            "colors": lr.color, "opacity_logits": lr.opacity, "bg_logits": lr.bg_logit,
            "color_scale": lr.color_calibration, "color_offset": lr.color_calibration}


def initial_scene(dataset, config: RunConfig) -> GaussianScene:
    pc = dataset.point_cloud()
    if pc.points.shape[0] == 0:
        raise ConfigurationError("empty initial point cloud")
    fg = pc.fg
    if fg is None:
        fg = dataset.vote_foreground(pc.points, _train_camera_names(dataset, config))
    return init_scene_from_point_cloud(pc.points, pc.colors, fg, config.init_opacity)


def fit_first_frame(dataset, config: RunConfig, scene: GaussianScene | None = None,
                    progress: ProgressLog | None = None):
    """Static fit of timestep 0. Returns ``(scene, calibration, FitStats)``."""
    names = _train_camera_names(dataset, config)
    scene = initial_scene(dataset, config) if scene is None else scene.copy()
    extent = scene.extent(0)
    calib_names = sorted(names)
    calib_scale = np.ones((len(calib_names), 3))
    calib_offset = np.zeros((len(calib_names), 3))
    row_of = {nm: k for k, nm in enumerate(calib_names)}
    lrs = _lr_table(config, extent)
    state = OptimizerState(lrs, config.weights, (config.first_frame_iterations, config.timestep_iterations))
    params = _params_t0(scene, calib_scale, calib_offset)
    state.reset(params)
    sampler = _ViewSampler(names, config.seed, 0)
    rng = np.random.default_rng([config.seed, 0, 1])
    dens = config.densify
    grad_accum = np.zeros(scene.n)
    grad_count = np.zeros(scene.n)
    stats = FitStats(0, config.first_frame_iterations)
    iters = config.first_frame_iterations
    for it in range(iters):
        name = sampler.next()
        calibration = {nm: (calib_scale[row_of[nm]], calib_offset[row_of[nm]]) for nm in calib_names}
        losses, g, out = _render_terms(scene, 0, dataset, name, config, calibration)
        grads = {"centers": g.d_centers, "rotations": g.d_rotations, "log_scales": g.d_log_scales,
                 "colors": g.d_colors, "opacity_logits": g.d_opacity_logits, "bg_logits": g.d_bg_logits,
                 "color_scale": np.zeros_like(calib_scale), "color_offset": np.zeros_like(calib_offset)}
        grads["color_scale"][row_of[name]] = g.d_color_scale
        grads["color_offset"][row_of[name]] = g.d_color_offset
        frac = it / max(iters - 1, 1)
        pos_lr = extent * math.exp((1 - frac) * math.log(config.lr.position)
                                   + frac * math.log(config.lr.position_final))
        state.step(params, grads, {"centers": pos_lr})
        np.clip(scene.colors, 0.0, 1.0, out=scene.colors)

        total = config.weights.image * losses["image"] + config.weights.seg * losses["seg"]
        stats.losses.append(losses["image"])
        if progress is not None:
            progress.add(timestep=0, iteration=it, camera=name, total=total, image=losses["image"],
                         seg=losses["seg"], n_gaussians=scene.n)

        if dens.enabled and it < dens.stop:
            cam = dataset.camera(name, 0)
            ndc = g.d_mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
            seen = out.replay.splats.valid & (np.bincount(out.replay.point_list, minlength=scene.n) > 0)
            grad_accum += np.where(seen, np.linalg.norm(ndc, axis=1), 0.0)
            grad_count += seen
            if it >= dens.start and (it + 1) % dens.interval == 0:
                scene, origin = densify_and_prune(scene, grad_accum, grad_count, dens, extent, rng)
                params = _params_t0(scene, calib_scale, calib_offset)
                state.remap_rows(origin, ("centers", "rotations", "log_scales", "colors",
                                          "opacity_logits", "bg_logits"))
                grad_accum = np.zeros(scene.n)
                grad_count = np.zeros(scene.n)
    calibration = {nm: (calib_scale[row_of[nm]].copy(), calib_offset[row_of[nm]].copy())
                   for nm in calib_names}
    return scene, calibration, stats


def fit_timestep(scene: GaussianScene, t: int, dataset, config: RunConfig, graph: NeighborGraph,
                 calibration: dict, progress: ProgressLog | None = None) -> FitStats:
    """Append timestep ``t`` to ``scene`` (in place) and optimize its centers and rotations."""
    if t < 1:
        raise InvalidCallError("fit_timestep handles t >= 1; use fit_first_frame for t = 0")
    if t != scene.timesteps:
        raise InvalidCallError(f"scene holds {scene.timesteps} timesteps, cannot fit t={t}")
    if t >= dataset.timesteps:
        raise IndexError(f"dataset has no images for timestep {t}")
    names = _train_camera_names(dataset, config)
    mu, q = forward_propagate_init(scene, t, config.forward_propagation)
    scene.append_timestep(mu, q)
    extent = scene.extent(0)
    lrs = _lr_table(config, extent)
    if config.lr.position_timestep is not None:
        lrs["centers"] = config.lr.position_timestep * extent
    state = OptimizerState(lrs, config.weights, (config.first_frame_iterations, config.timestep_iterations))
    params = {"centers": scene.centers[t], "rotations": scene.rotations[t]}
    if not config.fix_static:
        params.update({"log_scales": scene.log_scales, "colors": scene.colors,
                       "opacity_logits": scene.opacity_logits, "bg_logits": scene.bg_logits})
    state.reset(params)
    sampler = _ViewSampler(names, config.seed, t)
    w = config.weights
    seg_t = w.seg if w.seg_timestep is None else w.seg_timestep
    stats = FitStats(t, config.timestep_iterations)
    for it in range(config.timestep_iterations):
        name = sampler.next()
        losses, g, _ = _render_terms(scene, t, dataset, name, config, calibration, seg_t)
        d_mu, d_q = g.d_centers, g.d_rotations
        for key, weight, fn in (("rigid", w.rigid, rigidity_loss), ("rot", w.rot, rotation_loss),
                                ("iso", w.iso, isometry_loss)):
            if weight > 0:
                val, gm, gq = fn(scene, t, graph)
                losses[key] = val
                d_mu = d_mu + weight * gm
                d_q = d_q + weight * gq
            else:
                losses[key] = 0.0
        if w.immobility > 0:
            val, gm, gq = immobility_loss(scene, t)
            losses["immobility"] = val
            d_mu = d_mu + w.immobility * gm
            d_q = d_q + w.immobility * gq
        else:
            losses["immobility"] = 0.0
        grads = {"centers": d_mu, "rotations": d_q, "log_scales": g.d_log_scales, "colors": g.d_colors,
                 "opacity_logits": g.d_opacity_logits, "bg_logits": g.d_bg_logits}
        state.step(params, grads)
        if not config.fix_static:
            np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
        total = (w.image * losses["image"] + seg_t * losses["seg"] + w.rigid * losses["rigid"]
                 + w.rot * losses["rot"] + w.iso * losses["iso"] + w.immobility * losses["immobility"])
        stats.losses.append(losses["image"])
        if progress is not None:
            progress.add(timestep=t, iteration=it, camera=name, total=total, n_gaussians=scene.n,
                         **losses)
    stats.regressions = count_window_regressions(stats.losses)
    return stats


def count_window_regressions(losses, window: int = 50, tol: float = 1e-12) -> int:
    """Number of consecutive ``window``-iteration blocks whose mean loss went up."""
    losses = np.asarray(losses, dtype=np.float64)
    blocks = losses.size // window
    if blocks < 2:
        return 0
    means = losses[: blocks * window].reshape(blocks, window).mean(axis=1)
    return int(np.sum(np.diff(means) > tol))


@dataclass
class TrainResult:
    scene: GaussianScene
    calibration: dict
    graph: NeighborGraph
    stats: list
    progress: ProgressLog


def train(dataset, config: RunConfig, progress: ProgressLog | None = None,
          on_timestep=None) -> TrainResult:
    """Full online pipeline over every timestep of ``dataset``.

    ``on_timestep(t, scene, calibration)`` is called after each timestep is
    fitted, e.g. to write intermediate checkpoints.
    """
    progress = ProgressLog() if progress is None else progress
    scene, calibration, stats0 = fit_first_frame(dataset, config, progress=progress)
    log.info("timestep 0 fitted: %d gaussians, final image loss %.5f", scene.n,
             stats0.losses[-1] if stats0.losses else float("nan"))
    if on_timestep is not None:
        on_timestep(0, scene, calibration)
    graph = build_neighbor_graph(scene, 0.5, config.knn, config.lambda_w)
    stats = [stats0]
    last = dataset.timesteps if config.max_timesteps is None else min(config.max_timesteps, dataset.timesteps)
    for t in range(1, last):
        st = fit_timestep(scene, t, dataset, config, graph, calibration, progress)
        log.info("timestep %d fitted: final image loss %.5f", t, st.losses[-1] if st.losses else float("nan"))
        stats.append(st)
        if on_timestep is not None:
            on_timestep(t, scene, calibration)
    return TrainResult(scene, calibration, graph, stats, progress)
