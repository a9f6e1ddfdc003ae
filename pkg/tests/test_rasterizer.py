import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_camera, make_scene, random_rotation
from dyngauss.gaussians import GaussianScene, build_covariance, quat_multiply, rotmat_to_quat
from dyngauss.gradcheck import random_scene
from dyngauss.rasterizer import (FAR_VALUE, RasterSettings, Splats, composite, composite_reference,
                                 depth_sort_and_cull, project_mean, projection_jacobian, rasterize,
                                 splat_covariance, splat_scene)

INF = RasterSettings(cull_radius=math.inf)


def cam100():
    return make_camera(101, 101, f=100.0)


class TestProjection:
    def test_optical_axis(self):
        cam = make_camera(100, 100, f=100.0)
        cam.cx = cam.cy = 50.0
        uv, z = project_mean([0, 0, 2.0], cam)
        assert np.allclose(uv, [50, 50]) and z == 2.0

    def test_off_axis(self):
        cam = make_camera(100, 100, f=100.0)
        cam.cx = cam.cy = 50.0
        uv, _ = project_mean([0.02, 0, 2.0], cam)
        assert np.allclose(uv, [51, 50])

    def test_behind_camera_is_culled(self):
        uv, z = project_mean([0, 0, -1.0], cam100())
        assert uv is None and z == -1.0
        assert projection_jacobian([0, 0, -1.0], cam100()) is None

    def test_jacobian_on_axis(self):
        assert np.allclose(projection_jacobian([0, 0, 2.0], cam100()), [[50, 0, 0], [0, 50, 0]])

    def test_jacobian_entry(self):
        assert projection_jacobian([0.1, 0, 2.0], cam100())[0, 2] == pytest.approx(-2.5)

    def test_jacobian_finite_differences(self, rng):
        cam = cam100()
        for _ in range(20):
            p = np.array([*rng.uniform(-0.5, 0.5, 2), rng.uniform(1, 4)])
            h = 1e-6
            num = np.stack([(project_mean(p + h * e, cam)[0] - project_mean(p - h * e, cam)[0]) / (2 * h)
                            for e in np.eye(3)], axis=1)
            assert np.max(np.abs(num - projection_jacobian(p, cam))) < 1e-6


class TestSplatCovariance:
    def test_isotropic_on_axis(self):
        cov = splat_covariance(0.01 * np.eye(3), cam100(), [0, 0, 2.0], eps_pix=0.0)
        assert np.allclose(cov, 25 * np.eye(2))

    def test_low_pass_floor(self):
        cov = splat_covariance(np.zeros((3, 3)), cam100(), [0, 0, 2.0])
        assert np.allclose(cov, 0.09 * np.eye(2))

    def test_isotropic_rotation_invariant(self, rng):
        for _ in range(5):
            q = rng.normal(size=4)
            a = splat_covariance(build_covariance(np.full(3, -2.0), q), cam100(), [0.1, -0.2, 2.0])
            b = splat_covariance(0.1 ** 2 * np.eye(3) * np.exp(0) * (np.exp(-2.0) / 0.1) ** 2, cam100(),
                                 [0.1, -0.2, 2.0])
            assert np.allclose(a, b, rtol=1e-12)


def _splats_from(depths, idx_order=None, size=8):
    """Full-frame identical footprints at the given depths."""
    n = len(depths)
    return Splats(mean2d=np.full((n, 2), size / 2.0), cov2d=np.tile(np.eye(2), (n, 1, 1)),
                  conic=np.tile([1.0, 0.0, 1.0], (n, 1)), depth=np.asarray(depths, float),
                  opacity=np.full(n, 0.5), color=np.zeros((n, 3)), fg_prob=np.zeros(n),
                  valid=np.ones(n, bool), mu_cam=np.zeros((n, 3)), jac=np.zeros((n, 2, 3)),
                  cov3d=np.zeros((n, 3, 3)))


class TestSortAndCull:
    def test_depth_order(self):
        pl, ranges, _, _ = depth_sort_and_cull(_splats_from([2.0, 1.0]), 8, 8, tile_size=8)
        assert list(pl[ranges[0, 0]:ranges[0, 1]]) == [1, 0]

    def test_tie_break_by_index(self):
        depths = np.full(8, 5.0)
        pl, ranges, _, _ = depth_sort_and_cull(_splats_from(depths), 8, 8, tile_size=8)
        sub = [i for i in pl[ranges[0, 0]:ranges[0, 1]] if i in (3, 7)]
        assert sub == [3, 7]

    def test_tile_assignment_covers_footprint(self, rng):
        scene = random_scene(rng, 20)
        cam = make_camera(40, 40, f=40)
        sp = splat_scene(scene, 0, cam)
        pl, ranges, tx, ty = depth_sort_and_cull(sp, 40, 40, tile_size=8, cull_radius=3.0)
        for tile in range(tx * ty):
            members = set(pl[ranges[tile, 0]:ranges[tile, 1]])
            y, x = divmod(tile, tx)
            for g in np.flatnonzero(sp.valid):
                hx = 3 * math.sqrt(sp.cov2d[g, 0, 0])
                hy = 3 * math.sqrt(sp.cov2d[g, 1, 1])
                mx, my = sp.mean2d[g]
                overlaps = (mx + hx >= x * 8 and mx - hx <= x * 8 + 7 and my + hy >= y * 8
                            and my - hy <= y * 8 + 7)
                assert overlaps == (g in members)


class TestRasterize:
    def test_empty_scene(self):
        out = rasterize(GaussianScene.empty(), 0, make_camera(), background=(0.2, 0.3, 0.4))
        assert np.allclose(out.color, [0.2, 0.3, 0.4]) and np.all(out.alpha == 0)
        assert np.all(out.depth == FAR_VALUE)

    def test_single_opaque_contributor(self):
        scene = make_scene([[0, 0, 2.0]], log_scales=np.full((1, 3), 6.0), colors=[[0.2, 0.6, 0.9]],
                           opacity_logits=[40.0])
        out = rasterize(scene, 0, make_camera())
        assert np.allclose(out.color, [0.2, 0.6, 0.9], atol=1e-3)
        assert np.all(out.alpha > 0.999)

    def test_two_term_compositing(self):
        sp = _splats_from([1.0, 2.0])
        sp.conic[:] = 0.0
        sp.color[0], sp.color[1] = [1.0, 0, 0], [0, 1.0, 0]
        out = composite(sp, 8, 8, settings=INF)
        assert np.allclose(out.color, [0.5, 0.25, 0.0])
        assert np.allclose(out.alpha, 0.75)

    def test_background_where_alpha_zero(self, rng):
        scene = make_scene([[5.0, 5.0, 2.0]])
        out = rasterize(scene, 0, make_camera(), background=(0.1, 0.2, 0.3))
        empty = out.alpha == 0
        assert empty.any() and np.allclose(out.color[empty], [0.1, 0.2, 0.3])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference_bit_exact_without_culling(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, 15)
        cam = make_camera(20, 17, f=22)
        sp = splat_scene(scene, 0, cam)
        bg = rng.random(3)
        for ts in (4, 16):
            settings = RasterSettings(tile_size=ts, cull_radius=math.inf)
            a = composite(sp, 20, 17, bg, settings)
            b = composite_reference(sp, 20, 17, bg, settings)
            for ch in ("color", "depth", "fg", "alpha"):
                assert np.array_equal(getattr(a, ch), getattr(b, ch)), ch

    @given(st.integers(0, 10_000))
    def test_output_ranges_and_monotone_alpha(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, 8)
        out = rasterize(scene, 0, make_camera(12, 12), rng.random(3))
        assert np.all((out.alpha >= 0) & (out.alpha <= 1))
        assert np.all((out.color >= -1e-12) & (out.color <= 1 + 1e-12))
        assert np.all((out.fg >= 0) & (out.fg <= 1 + 1e-12))
        # adding a Gaussian never reduces accumulated alpha (transmittance only shrinks)
        more = scene.copy()
        extra = random_scene(rng, 1)
        more = GaussianScene([np.vstack([scene.centers[0], extra.centers[0]])],
                             [np.vstack([scene.rotations[0], extra.rotations[0]])],
                             np.vstack([scene.log_scales, extra.log_scales]),
                             np.vstack([scene.colors, extra.colors]),
                             np.concatenate([scene.opacity_logits, extra.opacity_logits]),
                             np.concatenate([scene.bg_logits, extra.bg_logits]))
        out2 = rasterize(more, 0, make_camera(12, 12), settings=INF)
        out1 = rasterize(scene, 0, make_camera(12, 12), settings=INF)
        assert np.all(out2.alpha >= out1.alpha - 1e-3)

    @pytest.mark.parametrize("seed", range(3))
    def test_tile_size_invariance_without_culling(self, seed):
        scene = random_scene(np.random.default_rng(seed), 20)
        cam = make_camera(24, 24, f=26)
        ref = rasterize(scene, 0, cam, settings=RasterSettings(tile_size=16, cull_radius=math.inf))
        for ts in (1, 3, 8, 32):
            out = rasterize(scene, 0, cam, settings=RasterSettings(tile_size=ts, cull_radius=math.inf))
            assert np.array_equal(out.color, ref.color)

    @pytest.mark.parametrize("seed", range(5))
    def test_rigid_transform_of_scene_and_camera(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, 12)
        cam = make_camera(16, 16)
        r = random_rotation(rng)
        b = rng.normal(size=3)
        qr = rotmat_to_quat(r)
        moved = scene.copy()
        moved.centers[0] = scene.centers[0] @ r.T + b
        moved.rotations[0] = quat_multiply(np.broadcast_to(qr, (scene.n, 4)), scene.rotations[0])
        # world -> world' is x' = r x + b, so the camera becomes E' = E * inv([r | b])
        ext = cam.extrinsic
        new_r = ext[:, :3] @ r.T
        cam2 = cam.with_extrinsic(np.hstack([new_r, (ext[:, 3] - new_r @ b)[:, None]]))
        a = rasterize(scene, 0, cam, settings=INF)
        c = rasterize(moved, 0, cam2, settings=INF)
        assert np.max(np.abs(a.color - c.color)) < 1e-6
        assert np.max(np.abs(a.depth - c.depth)) < 1e-6

    def test_deterministic(self, rng):
        scene = random_scene(rng, 30)
        cam = make_camera(32, 32)
        a = rasterize(scene, 0, cam)
        b = rasterize(scene, 0, cam)
        assert a.color.tobytes() == b.color.tobytes()
