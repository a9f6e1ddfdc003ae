import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dyngauss.gaussians import CameraModel, GaussianScene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

IDENTITY_EXT = np.hstack([np.eye(3), np.zeros((3, 1))])


def make_camera(width=16, height=16, f=20.0, ext=IDENTITY_EXT, name="cam"):
    return CameraModel(f, f, (width - 1) / 2.0, (height - 1) / 2.0, ext, width, height, name=name)


def make_scene(centers, log_scales=None, colors=None, opacity_logits=None, bg_logits=None, rotations=None):
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(centers)
    return GaussianScene(
        [centers],
        [np.tile([1.0, 0, 0, 0], (n, 1)) if rotations is None else rotations],
        np.full((n, 3), np.log(0.05)) if log_scales is None else log_scales,
        np.full((n, 3), 0.5) if colors is None else colors,
        np.zeros(n) if opacity_logits is None else opacity_logits,
        np.full(n, 3.0) if bg_logits is None else bg_logits,
    )


def random_rotation(rng):
    from scipy.spatial.transform import Rotation
    return Rotation.random(random_state=rng).as_matrix()


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in results.values():
        terminalreporter.write_line(line)
