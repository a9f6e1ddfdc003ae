import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_camera, make_scene, random_rotation, random_unit_quats

from dyngauss.gaussians import (CameraModel, GaussianScene, InvalidParameterError, influence_3d_all,
                                quat_from_axis_angle, quat_to_rotmat, rotmat_to_quat)
from dyngauss.rasterizer import project_mean, rasterize
from dyngauss.tracking import (BACKGROUND, TrackSet, most_influential_gaussian, most_influential_gaussians,
                               project_tracks, relative_rotation, track_pixel_2d, track_point, track_points,
                               unproject_pixel)


def _moving_scene(rng, n=8, steps=4):
    sc = make_scene(rng.normal(0, 0.3, (n, 3)), rotations=random_unit_quats(rng, n))
    for _ in range(1, steps):
        sc.append_timestep(sc.centers[-1] + rng.normal(0, 0.05, (n, 3)), random_unit_quats(rng, n))
    return sc


# ---------------------------------------------------------------- anchors

def test_center_of_only_gaussian_is_its_anchor():
    sc = make_scene(np.zeros((1, 3)), opacity_logits=np.array([np.log(9.0)]))
    assert most_influential_gaussian(sc, 0, np.zeros(3)) == 0


def test_far_point_is_background():
    sc = make_scene(np.zeros((1, 3)), opacity_logits=np.array([np.log(9.0)]))
    assert most_influential_gaussian(sc, 0, [5.0, 0, 0]) == BACKGROUND


def test_anchor_matches_brute_force_argmax(rng):
    sc = make_scene(rng.normal(0, 0.2, (50, 3)), log_scales=np.log(rng.uniform(0.03, 0.2, (50, 3))),
                    opacity_logits=rng.uniform(0, 4, 50), rotations=random_unit_quats(rng, 50),
                    bg_logits=rng.choice([-3.0, 3.0], 50))
    pts = rng.normal(0, 0.25, (300, 3))
    got = most_influential_gaussians(sc, 0, pts)
    infl = influence_3d_all(sc, 0, pts)
    infl[:, ~sc.foreground_mask()] = -1.0
    best = np.argmax(infl, axis=1)
    expected = np.where(infl[np.arange(300), best] >= 0.5, best, BACKGROUND)
    np.testing.assert_array_equal(got, expected)
    assert np.any(got != BACKGROUND) and np.any(got == BACKGROUND)


def test_background_gaussians_are_never_anchors():
    sc = make_scene(np.zeros((1, 3)), opacity_logits=np.array([5.0]), bg_logits=np.array([-3.0]))
    assert most_influential_gaussian(sc, 0, np.zeros(3)) == BACKGROUND


def test_ties_go_to_lowest_index():
    sc = make_scene(np.zeros((3, 3)), opacity_logits=np.full(3, 3.0))
    assert most_influential_gaussian(sc, 0, [0.01, 0, 0]) == 0


# ---------------------------------------------------------------- rigid map

def test_center_maps_to_center(rng):
    sc = _moving_scene(rng)
    p, _ = track_point(sc, sc.centers[0][3], 0, 2, anchor=3)
    np.testing.assert_allclose(p, sc.centers[2][3], atol=1e-15)


def test_static_scene_keeps_points_fixed(rng):
    sc = make_scene(rng.normal(0, 0.1, (5, 3)), log_scales=np.full((5, 3), np.log(0.2)))
    for _ in range(3):
        sc.append_timestep(sc.centers[0], sc.rotations[0])
    pts = rng.normal(0, 0.1, (40, 3))
    tr = track_points(sc, pts, 1)
    np.testing.assert_allclose(tr.positions, np.repeat(pts[:, None], 4, axis=1), atol=1e-15)


def test_pure_translation_hand_example():
    sc = make_scene(np.zeros((1, 3)), log_scales=np.full((1, 3), np.log(0.1)), opacity_logits=np.array([3.0]))
    sc.append_timestep(np.array([[0.05, 0, 0]]), sc.rotations[0])
    p, dr = track_point(sc, [0, 0.01, 0], 0, 1)
    np.testing.assert_allclose(p, [0.05, 0.01, 0], atol=1e-15)
    np.testing.assert_allclose(dr, np.eye(3), atol=1e-15)


def test_rotating_anchor_rotates_offset():
    sc = make_scene(np.zeros((1, 3)), log_scales=np.full((1, 3), np.log(0.1)), opacity_logits=np.array([3.0]))
    sc.append_timestep(np.array([[0.0, 0, 1]]), quat_from_axis_angle([0, 0, 1], np.pi / 2)[None])
    p, _ = track_point(sc, [0.01, 0, 0], 0, 1)
    np.testing.assert_allclose(p, [0, 0.01, 1.0], atol=1e-12)


def test_background_point_is_constant(rng):
    sc = _moving_scene(rng)
    tr = track_points(sc, [[30.0, 0, 0]])
    assert tr.anchors[0] == BACKGROUND
    np.testing.assert_array_equal(tr.positions[0], np.tile([30.0, 0, 0], (4, 1)))
    np.testing.assert_array_equal(tr.rotations[0], np.tile([1.0, 0, 0, 0], (4, 1)))


def test_invalid_timestep_raises(rng):
    sc = _moving_scene(rng)
    with pytest.raises(IndexError):
        track_point(sc, np.zeros(3), 0, 9)


def test_source_row_is_query_exactly(rng):
    sc = _moving_scene(rng)
    pts = rng.normal(0, 0.3, (50, 3))
    tr = track_points(sc, pts, 2, anchors=np.arange(50) % sc.n)
    assert tr.positions[:, 2].tobytes() == pts.tobytes()


@given(st.integers(0, 2 ** 31 - 1))
def test_fixed_anchor_round_trip_is_exact(seed):
    rng = np.random.default_rng(seed)
    sc = _moving_scene(rng)
    p = rng.normal(0, 0.5, 3)
    j = int(rng.integers(sc.n))
    fwd, dr = track_point(sc, p, 0, 3, anchor=j)
    back, dr_inv = track_point(sc, fwd, 3, 0, anchor=j)
    np.testing.assert_allclose(back, p, atol=1e-12)
    np.testing.assert_allclose(dr @ dr_inv, np.eye(3), atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_relative_rotation_is_proper(seed):
    rng = np.random.default_rng(seed)
    sc = _moving_scene(rng)
    sc.rotations[2] = sc.rotations[2] * rng.uniform(0.2, 5.0, (sc.n, 1))  # unnormalized storage
    dr = relative_rotation(sc, int(rng.integers(sc.n)), 0, 2)
    np.testing.assert_allclose(dr.T @ dr, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(dr) - 1.0) < 1e-9


def test_shared_anchor_preserves_distances(rng):
    sc = _moving_scene(rng)
    pts = rng.normal(0, 0.2, (20, 3))
    tr = track_points(sc, pts, 0, anchors=np.full(20, 4))
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    for t in range(sc.timesteps):
        dt = np.linalg.norm(tr.positions[:, t, None] - tr.positions[None, :, t], axis=-1)
        np.testing.assert_allclose(dt, d0, atol=1e-12)


def test_track_rotations_match_relative_rotation(rng):
    sc = _moving_scene(rng)
    tr = track_points(sc, sc.centers[0][:3], 0, anchors=[0, 1, 2])
    for k in range(3):
        np.testing.assert_allclose(quat_to_rotmat(tr.rotations[k, 3]), relative_rotation(sc, k, 0, 3),
                                   atol=1e-12)


def test_track_file_round_trip(tmp_path, rng):
    sc = _moving_scene(rng)
    tr = track_points(sc, rng.normal(0, 0.3, (5, 3)), 1, anchors=[0, 1, BACKGROUND, 3, 4])
    cam = CameraModel.look_at([0, 0, -3.0], [0, 0, 0], [0, 1, 0], 30, 30, 32, 32, name="cam")
    renders = {("cam", t): rasterize(sc, t, cam) for t in range(sc.timesteps)}
    project_tracks(tr, [cam], renders)
    tr.save(tmp_path / "tracks.json")
    back = TrackSet.load(tmp_path / "tracks.json")
    np.testing.assert_array_equal(back.positions, tr.positions)
    np.testing.assert_array_equal(back.anchors, tr.anchors)
    np.testing.assert_array_equal(back.projections["cam"][1], tr.projections["cam"][1])
    with pytest.raises(InvalidParameterError):
        TrackSet.from_json({"format": "other"})


# ---------------------------------------------------------------- pixels

def _wall(depth=2.0, x=0.0, color=0.5, scale=2.0):
    return make_scene(np.array([[x, 0.0, depth]]), log_scales=np.full((1, 3), np.log(scale)),
                      opacity_logits=np.array([40.0]), colors=np.full((1, 3), color))


def test_unproject_on_axis_opaque_gaussian():
    cam = make_camera(width=17, height=17, f=20.0)
    p = unproject_pixel(_wall(2.0), 0, cam, (8, 8))
    np.testing.assert_allclose(p, [0, 0, 2.0], atol=1e-3)


def test_unproject_empty_pixel_is_invalid_and_bounds_are_checked():
    cam = make_camera()
    sc = make_scene(np.array([[0.0, 0, 2.0]]), log_scales=np.full((1, 3), np.log(0.01)))
    assert unproject_pixel(sc, 0, cam, (0, 0)) is None
    with pytest.raises(InvalidParameterError):
        unproject_pixel(sc, 0, cam, (16, 0))


def test_unproject_then_project_round_trip(rng):
    cam = CameraModel.look_at([0.3, -0.2, -2.5], [0, 0, 0], [0, 1, 0], 30, 30, 32, 32)
    ext = cam.extrinsic
    sc = _wall(0.0, scale=0.6)
    for _ in range(20):
        px = rng.integers(10, 22, 2)
        p = unproject_pixel(sc, 0, cam, px)
        assert p is not None
        uv, _ = project_mean(p, cam)
        assert np.all(np.abs(uv - px) <= 0.5)
    assert cam.extrinsic is ext


def test_static_scene_pixel_track_is_constant():
    cam = make_camera(width=17, height=17, name="a")
    sc = _wall(2.0)
    for _ in range(3):
        sc.append_timestep(sc.centers[0], sc.rotations[0])
    res = track_pixel_2d(sc, cam, (5, 11), 0, [cam])
    assert res.ok
    uv, vis = res.projections["a"]
    assert np.all(np.abs(uv - [5, 11]) <= 0.5) and vis.all()


def test_translating_scene_pixel_track_follows_projection():
    cam = CameraModel.look_at([0, 0, -2.0], [0, 0, 0], [0, 1, 0], 40, 40, 48, 48, name="a")
    sc = make_scene(np.zeros((1, 3)), log_scales=np.array([[np.log(0.4), np.log(0.4), np.log(0.02)]]),
                    opacity_logits=np.array([40.0]))
    for t in range(1, 4):
        sc.append_timestep(np.array([[0.05 * t, 0, 0]]), sc.rotations[0])
    res = track_pixel_2d(sc, cam, (30, 20), 0, [cam])
    p0 = res.positions[0]
    uv, vis = res.projections["a"]
    for t in range(4):
        expected, _ = project_mean(p0 + [0.05 * t, 0, 0], cam)
        assert np.linalg.norm(uv[t] - expected) < 1.0
    assert vis.all()


def test_occluded_point_is_not_visible():
    cam_front = make_camera(width=17, height=17, name="front")
    # a thin near wall occludes the far wall in this view only at t=1
    far = _wall(3.0)
    sc = GaussianScene([np.vstack([far.centers[0], [[0, 0, -50.0]]])],
                       [np.tile([1.0, 0, 0, 0], (2, 1))], np.log(np.array([[2.0] * 3, [2.0, 2.0, 0.01]])),
                       np.full((2, 3), 0.5), np.array([40.0, 40.0]), np.array([3.0, -3.0]))
    sc.append_timestep(np.array([[0, 0, 3.0], [0, 0, 1.5]]), sc.rotations[0])
    res = track_pixel_2d(sc, cam_front, (8, 8), 0, [cam_front])
    assert res.ok and res.anchor == 0
    _, vis = res.projections["front"]
    assert vis[0] and not vis[1]


def test_rejected_source_pixel_reports_reason():
    cam = make_camera()
    sc = make_scene(np.array([[0.0, 0, 2.0]]), log_scales=np.full((1, 3), np.log(0.01)))
    res = track_pixel_2d(sc, cam, (0, 0), 0, [cam])
    assert not res.ok and "alpha" in res.reason


def test_tracking_is_equivariant_under_world_rigid_motion(rng):
    sc = _moving_scene(rng)
    r = random_rotation(rng)
    shift = rng.normal(size=3)
    moved = sc.copy()
    qr = rotmat_to_quat(r)
    from dyngauss.gaussians import quat_multiply
    for t in range(sc.timesteps):
        moved.centers[t] = sc.centers[t] @ r.T + shift
        moved.rotations[t] = quat_multiply(np.broadcast_to(qr, sc.rotations[t].shape), sc.rotations[t])
    pts = rng.normal(0, 0.3, (10, 3))
    a = track_points(sc, pts, 0, anchors=np.arange(10) % sc.n)
    b = track_points(moved, pts @ r.T + shift, 0, anchors=np.arange(10) % sc.n)
    np.testing.assert_allclose(b.positions, a.positions @ r.T + shift, atol=1e-12)
