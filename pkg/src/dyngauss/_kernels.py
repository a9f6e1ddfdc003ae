"""Compiled per-tile compositing kernels.

Each tile owns a contiguous slice ``point_list[start:end]`` of Gaussian ids
sorted front to back. Tiles write disjoint pixels in the forward pass; the
backward pass writes per-slot gradients (one slot per tile/Gaussian pair), so
the final per-Gaussian reduction does not depend on the thread count.
"""
import math

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def composite_forward(tile_ranges, point_list, mean2d, conic, opacity, feats,
                      width, height, tile_size, tiles_x,
                      alpha_max, alpha_min, t_min,
                      out_feat, out_t, out_last):
    n_tiles = tile_ranges.shape[0]
    n_feat = feats.shape[1]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        end = tile_ranges[tile, 1]
        y1 = min((ty + 1) * tile_size, height)
        x1 = min((tx + 1) * tile_size, width)
        for py in range(ty * tile_size, y1):
            for px in range(tx * tile_size, x1):
                trans = 1.0
                last = start
                for k in range(start, end):
                    g = point_list[k]
                    dx = mean2d[g, 0] - px
                    dy = mean2d[g, 1] - py
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = min(alpha_max, opacity[g] * math.exp(power))
                    if alpha < alpha_min:
                        continue
                    w = alpha * trans
                    for ch in range(n_feat):
                        out_feat[py, px, ch] += feats[g, ch] * w
                    trans = trans * (1.0 - alpha)
                    last = k + 1
                    # the contributor that crosses the threshold is kept, then we stop
                    if trans < t_min:
                        break
                out_t[py, px] = trans
                out_last[py, px] = last


@njit(cache=True, parallel=True)
def composite_backward(tile_ranges, point_list, mean2d, conic, opacity, feats,
                       width, height, tile_size, tiles_x,
                       alpha_max, alpha_min,
                       final_t, last_contrib, d_feat, d_final_t,
                       g_mean2d, g_conic, g_opacity, g_feat):
    """Back-to-front replay. ``d_feat`` is dL/d(composited feature) per pixel and
    ``d_final_t`` is dL/d(final transmittance) per pixel (background and alpha terms)."""
    n_tiles = tile_ranges.shape[0]
    n_feat = feats.shape[1]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        y1 = min((ty + 1) * tile_size, height)
        x1 = min((tx + 1) * tile_size, width)
        accum = np.zeros(n_feat)
        last_feat = np.zeros(n_feat)
        for py in range(ty * tile_size, y1):
            for px in range(tx * tile_size, x1):
                last = last_contrib[py, px]
                if last <= start:
                    continue
                t_final = final_t[py, px]
                dt_final = d_final_t[py, px]
                trans = t_final
                for ch in range(n_feat):
                    accum[ch] = 0.0
                    last_feat[ch] = 0.0
                last_alpha = 0.0
                for k in range(last - 1, start - 1, -1):
                    g = point_list[k]
                    dx = mean2d[g, 0] - px
                    dy = mean2d[g, 1] - py
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    gval = math.exp(power)
                    raw = opacity[g] * gval
                    alpha = min(alpha_max, raw)
                    if alpha < alpha_min:
                        continue
                    trans = trans / (1.0 - alpha)
                    w = alpha * trans
                    d_alpha = 0.0
                    for ch in range(n_feat):
                        accum[ch] = last_alpha * last_feat[ch] + (1.0 - last_alpha) * accum[ch]
                        last_feat[ch] = feats[g, ch]
                        d_alpha += (feats[g, ch] - accum[ch]) * d_feat[py, px, ch]
                        g_feat[k, ch] += w * d_feat[py, px, ch]
                    d_alpha *= trans
                    last_alpha = alpha
                    d_alpha += -t_final / (1.0 - alpha) * dt_final
                    if raw > alpha_max:
                        continue
                    d_g = opacity[g] * d_alpha
                    gdx = gval * dx
                    gdy = gval * dy
                    g_mean2d[k, 0] += d_g * (-gdx * conic[g, 0] - gdy * conic[g, 1])
                    g_mean2d[k, 1] += d_g * (-gdy * conic[g, 2] - gdx * conic[g, 1])
                    g_conic[k, 0] += -0.5 * gdx * dx * d_g
                    g_conic[k, 1] += -gdx * dy * d_g
                    g_conic[k, 2] += -0.5 * gdy * dy * d_g
                    g_opacity[k] += gval * d_alpha
