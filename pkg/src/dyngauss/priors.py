"""Local-rigidity, rotation-similarity and isometry regularizers plus background losses.

All neighbor losses run over a fixed k-nearest-neighbor graph of foreground
Gaussians built at timestep 0 and are normalized by ``1 / (k * |S_fg|)``.
Norms are un-squared L2; the subgradient at zero is taken as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .backward import ParamGradients, backward_rasterize
from .gaussians import (CameraModel, GaussianScene, InvalidCallError, InvalidParameterError,
                        quat_conjugate, quat_multiply, quat_normalize, quat_normalize_vjp,
                        quat_to_rotmat, quat_to_rotmat_vjp, right_multiply_matrix)
from .rasterizer import RenderOutput

DEFAULT_K = 20
LAMBDA_W = 2000.0


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborGraph:
    """k-NN graph over foreground Gaussians at timestep 0.

    ``sources[m]`` is the global id of the m-th foreground Gaussian and
    ``indices[m]`` its k neighbor ids (global), with matching ``weights`` and
    ``rest_distance`` rows.
    """
    sources: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    rest_distance: np.ndarray
    foreground_mask: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_foreground(self) -> int:
        return self.sources.shape[0]

    def __post_init__(self):
        for arr in (self.sources, self.indices, self.weights, self.rest_distance, self.foreground_mask):
            arr.setflags(write=False)


def neighbor_weight(dist, lambda_w: float = LAMBDA_W):
    return np.exp(-lambda_w * np.asarray(dist, dtype=np.float64) ** 2)


def build_neighbor_graph(scene: GaussianScene, fg_threshold: float = 0.5, k: int = DEFAULT_K,
                         lambda_w: float = LAMBDA_W) -> NeighborGraph:
    fg = scene.fg_probs > fg_threshold
    sources = np.flatnonzero(fg)
    if sources.size < k + 1:
        raise ConfigurationError(f"need at least {k + 1} foreground Gaussians, found {sources.size}")
    pts = scene.centers[0][sources]
    dist, nn = cKDTree(pts).query(pts, k=k + 1)
    # drop self matches; coincident points may put self anywhere in the row
    rows = []
    for m in range(sources.size):
        row = [c for c in nn[m] if c != m][:k]
        rows.append(row)
    local = np.asarray(rows, dtype=np.int64)
    indices = sources[local]
    rest = np.linalg.norm(scene.centers[0][indices] - scene.centers[0][sources][:, None], axis=-1)
    return NeighborGraph(sources=sources, indices=indices, weights=neighbor_weight(rest, lambda_w),
                         rest_distance=rest, foreground_mask=fg)


def _safe_unit(v):
    norm = np.linalg.norm(v, axis=-1)
    unit = np.divide(v, norm[..., None], out=np.zeros_like(v), where=norm[..., None] > 0)
    return norm, unit


def _check_t(scene: GaussianScene, t: int):
    scene.check_timestep(t)
    if t < 1:
        raise InvalidCallError("temporal priors need t >= 1")


def rigidity_loss(scene: GaussianScene, t: int, graph: NeighborGraph):
    """Returns ``(loss, d_centers_t, d_rotations_t)``."""
    _check_t(scene, t)
    src, nbr, w = graph.sources, graph.indices, graph.weights
    norm_c = 1.0 / (graph.k * graph.n_foreground)
    mu_prev, mu = scene.centers[t - 1], scene.centers[t]
    r_prev = quat_to_rotmat(scene.rotations[t - 1][src])
    r_cur = quat_to_rotmat(scene.rotations[t][src])
    r_rel = r_prev @ np.swapaxes(r_cur, 1, 2)
    prev_off = mu_prev[nbr] - mu_prev[src][:, None]
    cur_off = mu[nbr] - mu[src][:, None]
    resid = prev_off - np.einsum("mab,mkb->mka", r_rel, cur_off)
    dist, unit = _safe_unit(resid)
    loss = norm_c * float(np.sum(w * dist))

    g_r = (norm_c * w)[..., None] * unit
    g_cur = -np.einsum("mab,mka->mkb", r_rel, g_r)
    d_centers = np.zeros_like(mu)
    np.add.at(d_centers, nbr.ravel(), g_cur.reshape(-1, 3))
    np.add.at(d_centers, src, -g_cur.sum(axis=1))
    g_rel = -np.einsum("mka,mkb->mab", g_r, cur_off)
    g_rcur = np.swapaxes(g_rel, 1, 2) @ r_prev
    d_rotations = np.zeros_like(scene.rotations[t])
    np.add.at(d_rotations, src, quat_to_rotmat_vjp(scene.rotations[t][src], g_rcur))
    return loss, d_centers, d_rotations


def relative_rotations(scene: GaussianScene, t: int):
    """Normalized ``q_t * q_{t-1}^-1`` per Gaussian."""
    return quat_multiply(quat_normalize(scene.rotations[t]),
                         quat_conjugate(quat_normalize(scene.rotations[t - 1])))


def rotation_loss(scene: GaussianScene, t: int, graph: NeighborGraph):
    """Returns ``(loss, d_centers_t, d_rotations_t)``; centers get no gradient."""
    _check_t(scene, t)
    src, nbr, w = graph.sources, graph.indices, graph.weights
    norm_c = 1.0 / (graph.k * graph.n_foreground)
    rel = relative_rotations(scene, t)
    diff = rel[nbr] - rel[src][:, None]
    dist, unit = _safe_unit(diff)
    loss = norm_c * float(np.sum(w * dist))

    g = (norm_c * w)[..., None] * unit
    g_rel = np.zeros_like(rel)
    np.add.at(g_rel, nbr.ravel(), g.reshape(-1, 4))
    np.add.at(g_rel, src, -g.sum(axis=1))
    prev_inv = quat_conjugate(quat_normalize(scene.rotations[t - 1]))
    g_unit = np.einsum("nab,na->nb", right_multiply_matrix(prev_inv), g_rel)
    d_rotations = quat_normalize_vjp(scene.rotations[t], g_unit)
    return loss, np.zeros_like(scene.centers[t]), d_rotations


def isometry_loss(scene: GaussianScene, t: int, graph: NeighborGraph):
    """Returns ``(loss, d_centers_t, d_rotations_t)``; compares against timestep-0 distances."""
    _check_t(scene, t)
    src, nbr, w = graph.sources, graph.indices, graph.weights
    norm_c = 1.0 / (graph.k * graph.n_foreground)
    mu = scene.centers[t]
    off = mu[nbr] - mu[src][:, None]
    dist, unit = _safe_unit(off)
    gap = dist - graph.rest_distance
    loss = norm_c * float(np.sum(w * np.abs(gap)))

    g = (norm_c * w * np.sign(gap))[..., None] * unit
    d_centers = np.zeros_like(mu)
    np.add.at(d_centers, nbr.ravel(), g.reshape(-1, 3))
    np.add.at(d_centers, src, -g.sum(axis=1))
    return loss, d_centers, np.zeros_like(scene.rotations[t])


def segmentation_loss(rendered_fg, pseudo_gt_mask):
    """Mean L1 between the rendered foreground channel and a binary foreground mask."""
    fg = np.asarray(rendered_fg, dtype=np.float64)
    mask = np.asarray(pseudo_gt_mask, dtype=np.float64)
    if fg.shape != mask.shape:
        raise InvalidParameterError(f"mask shape {mask.shape} does not match render {fg.shape}")
    diff = fg - mask
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def immobility_loss(scene: GaussianScene, t: int, fg_threshold: float = 0.5):
    """Mean over background Gaussians of ``|mu_t - mu_0| + |q_t - q_0|`` (unit quaternions)."""
    scene.check_timestep(t)
    bg = ~scene.foreground_mask(fg_threshold)
    d_centers = np.zeros_like(scene.centers[t])
    d_rotations = np.zeros_like(scene.rotations[t])
    count = int(bg.sum())
    if t == 0 or count == 0:
        return 0.0, d_centers, d_rotations
    dmu, umu = _safe_unit(scene.centers[t][bg] - scene.centers[0][bg])
    q_t = scene.rotations[t][bg]
    dq, uq = _safe_unit(quat_normalize(q_t) - quat_normalize(scene.rotations[0][bg]))
    loss = float(np.sum(dmu + dq)) / count
    d_centers[bg] = umu / count
    d_rotations[bg] = quat_normalize_vjp(q_t, uq / count)
    return loss, d_centers, d_rotations


def background_losses(scene: GaussianScene, t: int, camera: CameraModel, render_output: RenderOutput,
                      pseudo_gt_mask, seg_weight: float = 1.0, immobility_weight: float = 1.0):
    """Segmentation + immobility loss; returns ``(loss, ParamGradients)`` for timestep ``t``."""
    seg, d_fg = segmentation_loss(render_output.fg, pseudo_gt_mask)
    grads = backward_rasterize(scene, t, camera, render_output, d_fg=seg_weight * d_fg)
    imm, d_mu, d_q = immobility_loss(scene, t)
    grads.d_centers = grads.d_centers + immobility_weight * d_mu
    grads.d_rotations = grads.d_rotations + immobility_weight * d_q
    return seg_weight * seg + immobility_weight * imm, grads
