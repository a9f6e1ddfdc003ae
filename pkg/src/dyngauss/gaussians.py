"""Dynamic 3D Gaussian scene representation and rotation/covariance algebra.

Each Gaussian carries a center and a quaternion per timestep plus static
log-scales, colors, an opacity logit and a background logit, i.e.
``7 * timesteps + 8`` scalars. Quaternions use the (w, x, y, z) Hamilton
convention and are stored unnormalized; every consumer normalizes on use.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"DYNGS\x00\x01\x00"
CHECKPOINT_VERSION = 1


class InvalidParameterError(ValueError):
    """Raised for malformed numeric inputs (zero quaternions, NaNs, bad shapes)."""


class InvalidCallError(RuntimeError):
    """Raised when an operation is invoked in a state where it is undefined."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ----------------------------------------------------------------------------
# quaternion algebra (batched over leading axes)
# ----------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise InvalidParameterError("quaternion with zero or non-finite norm")
    return q / n


def quat_normalize_vjp(q, grad_unit):
    """Pull a gradient w.r.t. ``q / |q|`` back to the raw quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    return (grad_unit - u * np.sum(u * grad_unit, axis=-1, keepdims=True)) / n


def quat_multiply(a, b):
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q):
    q = np.asarray(q, dtype=np.float64)
    return quat_conjugate(q) / np.sum(q * q, axis=-1, keepdims=True)


def right_multiply_matrix(b):
    """Matrix ``M`` with ``quat_multiply(a, b) == M @ a`` for every ``a``."""
    b = np.asarray(b, dtype=np.float64)
    w, x, y, z = np.moveaxis(b, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_rotvec(rotvec):
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec, axis=-1)
    safe = np.where(angle > 0, angle, 1.0)
    axis = rotvec / safe[..., None]
    half = 0.5 * angle
    q = np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)
    return q


def quat_to_rotmat(q):
    """Rotation matrix of a (batch of) quaternion(s); normalizes internally.

    ``q`` and ``-q`` map to the same matrix.
    """
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quat_to_rotmat_vjp(q, grad_r):
    """Gradient w.r.t. the raw quaternion given ``dL/dR`` (shape ``(..., 3, 3)``)."""
    u = quat_normalize(q)
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = grad_r
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return quat_normalize_vjp(q, np.stack([dw, dx, dy, dz], axis=-1))


def rotmat_to_quat(r):
    """Inverse of :func:`quat_to_rotmat` returning ``w >= 0`` quaternions."""
    r = np.asarray(r, dtype=np.float64)
    batch = r.shape[:-2]
    r = r.reshape(-1, 3, 3)
    out = np.empty((r.shape[0], 4))
    for k, m in enumerate(r):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[k] = q if q[0] >= 0 else -q
    return out.reshape(batch + (4,))


def build_covariance(log_scale, q):
    """Covariance ``R S S^T R^T`` with ``S = diag(exp(log_scale))``."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(q))):
        raise InvalidParameterError("non-finite scale or rotation")
    m = quat_to_rotmat(q) * np.exp(log_scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


# ----------------------------------------------------------------------------
# scene + camera containers
# ----------------------------------------------------------------------------

@dataclass
class CameraModel:
    """Pinhole camera with a world-to-camera rigid transform.

    ``extrinsic`` is the 3x4 matrix ``[R | t]`` mapping world points into the
    camera frame (x right, y down, z forward). ``color_scale`` and
    ``color_offset`` are the per-channel affine color calibration.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray
    width: int
    height: int
    color_scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    color_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(3, 4)
        self.color_scale = np.asarray(self.color_scale, dtype=np.float64).reshape(3)
        self.color_offset = np.asarray(self.color_offset, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be at least 1x1")
        r = self.rotation
        if (np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InvalidParameterError("extrinsic rotation block is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:, 3]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_extrinsic(self, extrinsic) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, extrinsic, self.width, self.height,
                           self.color_scale.copy(), self.color_offset.copy(), self.name)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, name=""):
        """Camera at ``eye`` looking at ``target``; image y axis points along ``-up``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        ext = np.concatenate([r, (-r @ eye)[:, None]], axis=1)
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, ext, width, height, name=name)


@dataclass
class GaussianScene:
    """Structure-of-arrays storage for ``n`` dynamic Gaussians.

    ``centers`` and ``rotations`` are lists with one ``(n, 3)`` / ``(n, 4)``
    array per stored timestep. Static attributes are stored once.
    """
    centers: list
    rotations: list
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    bg_logits: np.ndarray

    def __post_init__(self):
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        n = self.log_scales.shape[0]
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.bg_logits = np.asarray(self.bg_logits, dtype=np.float64).reshape(n)
        self.centers = [np.asarray(c, dtype=np.float64).reshape(n, 3) for c in self.centers]
        self.rotations = [np.asarray(r, dtype=np.float64).reshape(n, 4) for r in self.rotations]
        if len(self.centers) != len(self.rotations):
            raise InvalidParameterError("centers and rotations disagree on timestep count")
        for r in self.rotations:
            if n and np.any(np.linalg.norm(r, axis=1) == 0):
                raise InvalidParameterError("zero-norm quaternion in scene")

    @property
    def n(self) -> int:
        return self.log_scales.shape[0]

    @property
    def timesteps(self) -> int:
        return len(self.centers)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def fg_probs(self) -> np.ndarray:
        return sigmoid(self.bg_logits)

    def foreground_mask(self, threshold: float = 0.5) -> np.ndarray:
        return self.fg_probs > threshold

    def parameter_count(self) -> int:
        return self.n * (7 * self.timesteps + 8)

    def check_timestep(self, t: int) -> None:
        if not 0 <= t < self.timesteps:
            raise IndexError(f"timestep {t} out of range [0, {self.timesteps})")

    def covariances(self, t: int) -> np.ndarray:
        self.check_timestep(t)
        return build_covariance(self.log_scales, self.rotations[t])

    def append_timestep(self, centers, rotations) -> None:
        self.centers.append(np.asarray(centers, dtype=np.float64).reshape(self.n, 3).copy())
        self.rotations.append(np.asarray(rotations, dtype=np.float64).reshape(self.n, 4).copy())

    def copy(self) -> "GaussianScene":
        return GaussianScene([c.copy() for c in self.centers], [r.copy() for r in self.rotations],
                             self.log_scales.copy(), self.colors.copy(),
                             self.opacity_logits.copy(), self.bg_logits.copy())

    def select(self, keep) -> "GaussianScene":
        """Subset of Gaussians (by boolean mask or index array) across all timesteps."""
        return GaussianScene([c[keep] for c in self.centers], [r[keep] for r in self.rotations],
                             self.log_scales[keep], self.colors[keep],
                             self.opacity_logits[keep], self.bg_logits[keep])

    def extent(self, t: int = 0) -> float:
        """Radius of the sphere around the center mean that contains all centers."""
        c = self.centers[t]
        if len(c) == 0:
            return 1.0
        return float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1))) or 1.0

    @classmethod
    def empty(cls, timesteps: int = 1) -> "GaussianScene":
        return cls([np.zeros((0, 3))] * timesteps, [np.zeros((0, 4))] * timesteps,
                   np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))


def influence_3d(scene: GaussianScene, t: int, i: int, p) -> float:
    """Opacity-weighted unnormalized Gaussian density of Gaussian ``i`` at ``p``."""
    scene.check_timestep(t)
    if not 0 <= i < scene.n:
        raise IndexError(f"gaussian {i} out of range [0, {scene.n})")
    return float(influence_3d_all(scene, t, np.asarray(p, dtype=np.float64)[None])[0, i])


def influence_3d_all(scene: GaussianScene, t: int, points) -> np.ndarray:
    """Influence of every Gaussian on every point, shape ``(n_points, n)``.

    Uses ``d^T Sigma^-1 d = |S^-1 R^T d|^2`` so no matrix inverse is formed.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = quat_to_rotmat(scene.rotations[t])
    inv_s = np.exp(-scene.log_scales)
    d = points[:, None, :] - scene.centers[t][None, :, :]
    local = np.einsum("nji,pnj->pni", rot, d) * inv_s[None]
    maha2 = np.sum(local * local, axis=-1)
    return scene.opacities[None, :] * np.exp(-0.5 * maha2)


# ----------------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
# then the arrays named in header["arrays"] as contiguous little-endian
# float64 in that order. The header carries {format_version, n, timesteps}
# and optional per-camera color calibration; the array payload holds exactly
# n * (7 * timesteps + 8) scalars.

_ARRAY_ORDER = ("centers", "rotations", "log_scales", "colors", "opacity_logits", "bg_logits")


def save_checkpoint(scene: GaussianScene, path, calibration: dict | None = None,
                    metadata: dict | None = None) -> None:
    arrays = {
        "centers": np.stack(scene.centers) if scene.timesteps else np.zeros((0, scene.n, 3)),
        "rotations": np.stack(scene.rotations) if scene.timesteps else np.zeros((0, scene.n, 4)),
        "log_scales": scene.log_scales,
        "colors": scene.colors,
        "opacity_logits": scene.opacity_logits,
        "bg_logits": scene.bg_logits,
    }
    header = {
        "format_version": CHECKPOINT_VERSION,
        "n": scene.n,
        "timesteps": scene.timesteps,
        "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in _ARRAY_ORDER],
        "calibration": {
            name: {"scale": [float(v) for v in c[0]], "offset": [float(v) for v in c[1]]}
            for name, c in sorted((calibration or {}).items())
        },
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in _ARRAY_ORDER:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[GaussianScene, dict, dict]:
    """Returns ``(scene, calibration, metadata)``; calibration maps camera name to (scale, offset)."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise InvalidParameterError(f"{path}: not a scene checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise InvalidParameterError(f"unsupported checkpoint version {header['format_version']}")
    offset = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset) \
            .reshape(spec["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise InvalidParameterError(f"{path}: trailing or missing payload bytes")
    n, steps = header["n"], header["timesteps"]
    scene = GaussianScene([arrays["centers"][t] for t in range(steps)],
                          [arrays["rotations"][t] for t in range(steps)],
                          arrays["log_scales"], arrays["colors"],
                          arrays["opacity_logits"], arrays["bg_logits"])
    assert scene.n == n
    calibration = {k: (np.array(v["scale"]), np.array(v["offset"]))
                   for k, v in header.get("calibration", {}).items()}
    return scene, calibration, header.get("metadata", {})
