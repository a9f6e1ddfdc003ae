import numpy as np
import pytest

from conftest import make_camera, make_scene
from dyngauss.backward import backward_rasterize
from dyngauss.gaussians import sigmoid
from dyngauss.gradcheck import default_camera, gradcheck, random_scene
from dyngauss.losses import image_loss, ssim_with_grad
from dyngauss.rasterizer import InconsistentStateError, RasterSettings, rasterize


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        o = flat[j]
        flat[j] = o + h
        p = f()
        flat[j] = o - h
        m = f()
        flat[j] = o
        gf[j] = (p - m) / (2 * h)
    return g


class TestImageLoss:
    def test_identical_is_zero(self, rng):
        a = rng.random((8, 8, 3))
        assert image_loss(a, a.copy())[0] == pytest.approx(0.0, abs=1e-15)

    def test_pure_l1_constant_difference(self):
        a = np.full((6, 6, 3), 0.5)
        assert image_loss(a, a + 0.1, dssim_weight=0.0)[0] == pytest.approx(0.1)

    def test_gradient_matches_finite_differences(self, rng):
        a = rng.random((9, 7, 3))
        b = rng.random((9, 7, 3))
        _, g = image_loss(a, b)
        num = _fd(lambda: image_loss(a, b)[0], a)
        assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-6)) < 1e-4

    def test_ssim_gradient_grayscale(self, rng):
        a = rng.random((10, 10))
        b = rng.random((10, 10))
        _, g = ssim_with_grad(a, b)
        num = _fd(lambda: ssim_with_grad(a, b)[0], a)
        assert np.allclose(g, num, atol=1e-9)

    def test_shape_mismatch(self):
        from dyngauss.gaussians import InvalidParameterError
        with pytest.raises(InvalidParameterError):
            image_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_linearity_over_disjoint_regions(self, rng):
        scene = random_scene(rng, 10)
        cam = default_camera(16)
        out = rasterize(scene, 0, cam)
        target = rng.random(out.color.shape)
        mask = np.zeros(out.color.shape[:2], bool)
        mask[:, :7] = True
        d = np.sign(out.color - target)
        ga = backward_rasterize(scene, 0, cam, out, d_color=d * mask[..., None])
        gb = backward_rasterize(scene, 0, cam, out, d_color=d * ~mask[..., None])
        gu = backward_rasterize(scene, 0, cam, out, d_color=d)
        for name in ("d_centers", "d_rotations", "d_log_scales", "d_colors", "d_opacity_logits"):
            assert np.allclose(getattr(ga, name) + getattr(gb, name), getattr(gu, name), atol=1e-12)


class TestBackward:
    def test_zero_opacity_gives_zero_gradients(self, rng):
        scene = random_scene(rng, 6)
        scene.opacity_logits[:] = -30.0
        cam = default_camera()
        out = rasterize(scene, 0, cam)
        g = backward_rasterize(scene, 0, cam, out, d_color=np.ones(out.color.shape), d_depth=np.ones(out.depth.shape),
                               d_fg=np.ones(out.fg.shape), d_alpha=np.ones(out.alpha.shape))
        for name in ("d_centers", "d_rotations", "d_log_scales", "d_colors", "d_opacity_logits", "d_bg_logits"):
            assert np.all(getattr(g, name) == 0.0), name

    def test_single_gaussian_color_gradient_by_hand(self):
        scene = make_scene([[0.01, -0.02, 2.0]], log_scales=np.full((1, 3), np.log(0.08)),
                           colors=[[0.3, 0.5, 0.7]], opacity_logits=[0.4])
        cam = make_camera(9, 9)
        out = rasterize(scene, 0, cam)
        target = np.array([0.9, 0.1, 0.2])
        py, px = 4, 5
        d = np.zeros(out.color.shape)
        d[py, px] = 2 * (out.color[py, px] - target)
        g = backward_rasterize(scene, 0, cam, out, d_color=d)
        sp = out.replay.splats
        dx, dy = sp.mean2d[0] - [px, py]
        a, b, c = sp.conic[0]
        f = sigmoid(0.4) * np.exp(-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy)
        assert np.allclose(g.d_colors[0], 2 * (out.color[py, px] - target) * f * 1.0, rtol=1e-12)

    def test_fully_occluded_gaussian_gets_no_gradient(self):
        # two almost opaque walls terminate compositing before the hidden Gaussian is reached
        stacked = make_scene([[0, 0, 1.0], [0, 0, 3.0], [0, 0, 1.01]],
                             log_scales=np.log([[2.0, 2.0, 0.01], [0.1, 0.1, 0.1], [2.0, 2.0, 0.01]]),
                             opacity_logits=[30.0, 0.0, 30.0])
        cam = make_camera(8, 8)
        out = rasterize(stacked, 0, cam)
        assert np.all(1 - out.alpha < 1e-4)
        g = backward_rasterize(stacked, 0, cam, out, d_color=np.ones(out.color.shape))
        assert np.all(g.d_centers[1] == 0) and np.all(g.d_colors[1] == 0) and g.d_opacity_logits[1] == 0

    def test_stale_replay_rejected(self, rng):
        scene = random_scene(rng, 4)
        cam = default_camera()
        out = rasterize(scene, 0, cam)
        scene.centers[0][0, 0] += 0.01
        with pytest.raises(InconsistentStateError):
            backward_rasterize(scene, 0, cam, out, d_color=np.ones(out.color.shape))

    def test_gradients_finite(self, rng):
        scene = random_scene(rng, 20)
        cam = default_camera(24)
        out = rasterize(scene, 0, cam)
        g = backward_rasterize(scene, 0, cam, out, d_color=rng.normal(size=out.color.shape))
        assert all(np.all(np.isfinite(getattr(g, k))) for k in ("d_centers", "d_rotations", "d_log_scales"))


class TestGradcheck:
    @pytest.mark.parametrize("loss", ["image", "channels"])
    def test_five_gaussians(self, loss):
        scene = random_scene(np.random.default_rng(3), 5)
        rep = gradcheck(scene, default_camera(16), loss, seed=3)
        assert rep.passed and not rep.no_coverage
        assert all(g.max_rel_err < 1e-4 for g in rep.groups.values())
        assert sum(g.checked for g in rep.groups.values()) > 0

    @pytest.mark.parametrize("loss", ["rigid", "rot", "iso"])
    def test_priors(self, loss):
        scene = random_scene(np.random.default_rng(5), 10, timesteps=2, fg_fraction=1.0)
        rep = gradcheck(scene, loss=loss, seed=5, t=1)
        group = "rotations" if loss == "rot" else "centers"
        assert rep.passed and rep.groups[group].checked > 0

    def test_off_frame_scene_flags_no_coverage(self, rng):
        scene = random_scene(rng, 5)
        scene.centers[0][:, 0] += 100.0
        rep = gradcheck(scene, default_camera(16), "channels", seed=0)
        assert rep.no_coverage

    def test_repeatable(self):
        scene = random_scene(np.random.default_rng(9), 4)
        a = gradcheck(scene, default_camera(12), "image", seed=9).to_json()
        b = gradcheck(scene, default_camera(12), "image", seed=9).to_json()
        assert a == b

    def test_kink_signature_catches_termination_changes(self):
        rng = np.random.default_rng(2)
        scene = random_scene(rng, 12, depth=(2, 2.5), spread=0.05, scale=(0.1, 0.3))
        scene.opacity_logits[:] = rng.uniform(4, 9, 12)
        rep = gradcheck(scene, default_camera(16), "channels", seed=2)
        assert rep.passed

    def test_rejects_unknown_loss(self, rng):
        with pytest.raises(ValueError):
            gradcheck(random_scene(rng, 2), loss="nope")


def test_tile_size_does_not_change_gradients(rng):
    scene = random_scene(rng, 15)
    cam = default_camera(20)
    d = rng.normal(size=(20, 20, 3))
    ref = None
    for ts in (4, 16):
        settings = RasterSettings(tile_size=ts, cull_radius=np.inf)
        out = rasterize(scene, 0, cam, settings=settings)
        g = backward_rasterize(scene, 0, cam, out, d_color=d)
        if ref is None:
            ref = g
        else:
            assert np.allclose(g.d_centers, ref.d_centers, rtol=1e-10, atol=1e-14)
