"""Synthetic oracle scenes: textured rigid bodies on a static floor, scripted motion,
a hemisphere of cameras, rendered through the splatting rasterizer.

The generated directory is a regular dataset (see :mod:`dyngauss.dataset`)
plus the ground-truth scene checkpoint and ground-truth 3D/2D tracks.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, RotationSpline

from .dataset import MANIFEST_NAME, write_image, write_mask, write_ply
from .gaussians import CameraModel, GaussianScene, quat_multiply, rotmat_to_quat, save_checkpoint
from .rasterizer import rasterize
from .tracking import TrackSet, camera_to_world, most_influential_gaussians, pixel_ray, visibility


class SpecValidationError(ValueError):
    def __init__(self, message: str, path: str = "<root>"):
        super().__init__(f"{path}: {message}")
        self.field_path = path


_VEC3 = {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}}

SPEC_SCHEMA = {
    "type": "object",
    "properties": {
        "bodies": {"type": "array", "items": {
            "type": "object",
            "required": ["kind", "size", "center"],
            "properties": {
                "kind": {"enum": ["box", "sphere"]},
                "size": {"type": "array", "minItems": 1, "maxItems": 3,
                         "items": {"type": "number", "exclusiveMinimum": 0}},
                "center": _VEC3,
                "colors": {"type": "array", "minItems": 2, "maxItems": 2, "items": _VEC3},
                "checker": {"type": "number", "exclusiveMinimum": 0},
                "n_gaussians": {"type": "integer", "minimum": 1},
                "motion": {"type": "object"},
                "thickness": {"type": "number", "exclusiveMinimum": 0},
            }}},
        "hinge": {"type": ["object", "null"]},
        "floor": {"type": ["object", "null"]},
        "cameras": {"type": "object"},
        "timesteps": {"type": "integer", "minimum": 1},
        "noise": {"type": "number", "minimum": 0},
        "init_jitter": {"type": "number", "minimum": 0},
        "init_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "n_tracks_3d": {"type": "integer", "minimum": 0},
        "n_tracks_2d": {"type": "integer", "minimum": 0},
        "color_perturbation": {"type": "number", "minimum": 0},
        "background": _VEC3,
        "seed": {"type": "integer"},
    },
}


@dataclass
class MotionSpec:
    """Rigid motion of a body about its own rest center.

    ``constant``: ``velocity`` (m/frame) and ``angular_velocity`` (rotation
    vector, rad/frame). ``keyframes``: list of ``{"t", "translation",
    "rotvec"}`` interpolated with a cubic spline and a rotation spline.
    """
    kind: str = "static"
    velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    angular_velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    keyframes: list = field(default_factory=list)


@dataclass
class BodySpec:
    kind: str
    size: list              # box half extents (3) or sphere radius (1)
    center: list
    colors: list = field(default_factory=lambda: [[0.9, 0.3, 0.2], [0.2, 0.3, 0.8]])
    checker: float = 0.05   # texture cell size in meters
    n_gaussians: int = 200
    motion: MotionSpec = field(default_factory=MotionSpec)
    thickness: float = 1.0  # normal-to-tangential scale ratio of the surface Gaussians


@dataclass
class HingeSpec:
    """Makes ``child`` follow ``parent`` and additionally swing about a hinge.

    The hinge angle is ``amplitude * sin(2 pi t / period) + rate * t`` (radians).
    """
    parent: int = 0
    child: int = 1
    pivot: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    axis: list = field(default_factory=lambda: [0.0, 1.0, 0.0])
    rate: float = 0.0
    amplitude: float = 0.0
    period: float = 10.0


@dataclass
class FloorSpec:
    half_size: float = 0.4
    height: float = 0.0
    grid: int = 10
    colors: list = field(default_factory=lambda: [[0.55, 0.55, 0.5], [0.35, 0.4, 0.35]])
    checker: float = 0.1


@dataclass
class CameraRigSpec:
    n_train: int = 16
    n_test: int = 4
    radius: float = 1.0
    elevation: list = field(default_factory=lambda: [15.0, 65.0])  # degrees
    target: list = field(default_factory=lambda: [0.0, 0.0, 0.12])
    width: int = 64
    height: int = 64
    fov: float = 50.0  # horizontal, degrees


@dataclass
class SyntheticSceneSpec:
    bodies: list = field(default_factory=list)
    hinge: HingeSpec | None = None
    floor: FloorSpec | None = field(default_factory=FloorSpec)
    cameras: CameraRigSpec = field(default_factory=CameraRigSpec)
    timesteps: int = 10
    noise: float = 0.0
    init_jitter: float = 0.005
    init_fraction: float = 1.0
    n_tracks_3d: int = 200
    n_tracks_2d: int = 50
    color_perturbation: float = 0.0
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    seed: int = 0

    def __post_init__(self):
        self.bodies = [b if isinstance(b, BodySpec) else _body_from_dict(b) for b in self.bodies]
        if isinstance(self.hinge, dict):
            self.hinge = HingeSpec(**self.hinge)
        if isinstance(self.floor, dict):
            self.floor = FloorSpec(**self.floor)
        if isinstance(self.cameras, dict):
            self.cameras = CameraRigSpec(**self.cameras)
        self.validate()

    def validate(self) -> None:
        if not self.bodies:
            raise SpecValidationError("at least one body required", "bodies")
        for k, b in enumerate(self.bodies):
            if b.kind not in ("box", "sphere"):
                raise SpecValidationError(f"unknown body kind {b.kind!r}", f"bodies/{k}/kind")
            if len(b.size) != (3 if b.kind == "box" else 1) or min(b.size) <= 0:
                raise SpecValidationError("box needs 3 positive half extents, sphere 1 radius",
                                          f"bodies/{k}/size")
            if b.n_gaussians < 1:
                raise SpecValidationError("must be >= 1", f"bodies/{k}/n_gaussians")
            if b.motion.kind not in ("static", "constant", "keyframes"):
                raise SpecValidationError(f"unknown motion {b.motion.kind!r}", f"bodies/{k}/motion/kind")
            if b.motion.kind == "keyframes" and len(b.motion.keyframes) < 2:
                raise SpecValidationError("need at least two keyframes", f"bodies/{k}/motion/keyframes")
        if self.hinge is not None:
            h = self.hinge
            ok = range(len(self.bodies))
            if h.parent not in ok or h.child not in ok or h.parent == h.child:
                raise SpecValidationError("parent and child must be distinct body indices", "hinge")
        if self.timesteps < 1:
            raise SpecValidationError("must be >= 1", "timesteps")
        c = self.cameras
        if c.n_train < 1 or c.n_test < 0 or c.width < 1 or c.height < 1 or c.radius <= 0:
            raise SpecValidationError("need >= 1 train camera, positive size and radius", "cameras")
        if not 0 < self.init_fraction <= 1:
            raise SpecValidationError("must be in (0, 1]", "init_fraction")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSceneSpec":
        errors = sorted(jsonschema.Draft202012Validator(SPEC_SCHEMA).iter_errors(data),
                        key=lambda e: list(e.absolute_path))
        if errors:
            path = "/".join(str(p) for p in errors[0].absolute_path) or "<root>"
            raise SpecValidationError(errors[0].message, path)
        try:
            return cls(**data)
        except TypeError as exc:
            raise SpecValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SyntheticSceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _body_from_dict(d: dict) -> BodySpec:
    d = dict(d)
    if isinstance(d.get("motion"), dict):
        d["motion"] = MotionSpec(**d["motion"])
    return BodySpec(**d)


# ----------------------------------------------------------------------------
# ready-made scenes
# ----------------------------------------------------------------------------

def two_body_spec(seed: int = 0, timesteps: int = 10, n_per_body: int = 200, size: int = 64) -> SyntheticSceneSpec:
    """Two textured rigid bodies moving independently (up to 3 cm and 10 degrees per frame)."""
    deg = np.pi / 180.0
    return SyntheticSceneSpec(
        bodies=[
            BodySpec("box", [0.09, 0.07, 0.06], [-0.15, 0.0, 0.12],
                     colors=[[0.9, 0.35, 0.15], [0.15, 0.25, 0.75]], checker=0.045, n_gaussians=n_per_body,
                     motion=MotionSpec("constant", [0.005, 0.02, 0.0], [0.0, 0.0, 8.0 * deg])),
            BodySpec("sphere", [0.08], [0.16, 0.02, 0.14],
                     colors=[[0.95, 0.85, 0.2], [0.2, 0.6, 0.3]], checker=0.04, n_gaussians=n_per_body,
                     motion=MotionSpec("constant", [-0.005, -0.02, 0.004], [5.0 * deg, 0.0, 4.0 * deg])),
        ],
        floor=FloorSpec(half_size=0.4, grid=10),
        cameras=CameraRigSpec(16, 4, width=size, height=size),
        timesteps=timesteps, seed=seed)


def articulated_spec(seed: int = 0, timesteps: int = 10, n_per_body: int = 200,
                     size: int = 64) -> SyntheticSceneSpec:
    """A torso box with a swinging arm box attached by a hinge."""
    deg = np.pi / 180.0
    return SyntheticSceneSpec(
        bodies=[
            BodySpec("box", [0.08, 0.06, 0.08], [0.0, 0.0, 0.12],
                     colors=[[0.85, 0.3, 0.2], [0.2, 0.3, 0.8]], checker=0.04, n_gaussians=n_per_body,
                     motion=MotionSpec("constant", [0.02, 0.0, 0.0], [0.0, 0.0, 4.0 * deg])),
            BodySpec("box", [0.14, 0.03, 0.03], [0.22, 0.0, 0.17],
                     colors=[[0.7, 0.7, 0.2], [0.6, 0.55, 0.25]], checker=0.05, n_gaussians=n_per_body),
        ],
        hinge=HingeSpec(0, 1, pivot=[0.08, 0.0, 0.17], axis=[0.0, 1.0, 0.0], rate=-10.0 * deg),
        floor=FloorSpec(half_size=0.4, grid=10),
        cameras=CameraRigSpec(16, 4, width=size, height=size),
        timesteps=timesteps, seed=seed)


# ----------------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------------

def _frame_from_normal(normal):
    """Rotation matrices whose third column is ``normal``."""
    n = normal / np.linalg.norm(normal, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def _checker(coords, cell, colors):
    parity = np.sum(np.floor(coords / cell).astype(np.int64), axis=1) % 2
    colors = np.asarray(colors, dtype=np.float64)
    return np.where(parity[:, None] == 0, colors[0], colors[1])


def _sample_box(rng, half, n):
    half = np.asarray(half, dtype=np.float64)
    areas = []
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            faces.append((axis, sign, others))
            areas.append(4.0 * half[others[0]] * half[others[1]])
    areas = np.asarray(areas)
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[np.argsort(-areas)[: n - counts.sum()]] += 1
    pts, normals = [], []
    for (axis, sign, others), m in zip(faces, counts):
        if m == 0:
            continue
        p = np.zeros((m, 3))
        # jittered grid keeps coverage even
        g = int(np.ceil(np.sqrt(m)))
        cells = rng.permutation(g * g)[:m]
        u = (cells % g + rng.uniform(0.2, 0.8, m)) / g
        v = (cells // g + rng.uniform(0.2, 0.8, m)) / g
        p[:, others[0]] = (2 * u - 1) * half[others[0]]
        p[:, others[1]] = (2 * v - 1) * half[others[1]]
        p[:, axis] = sign * half[axis]
        nrm = np.zeros((m, 3))
        nrm[:, axis] = sign
        pts.append(p)
        normals.append(nrm)
    pts, normals = np.concatenate(pts), np.concatenate(normals)
    return pts, normals, float(areas.sum())


def _sample_sphere(rng, radius, n):
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k + rng.uniform(0, 2 * np.pi)
    d = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return radius * d, d, 4 * np.pi * radius ** 2


@dataclass
class GroundTruth:
    scene: GaussianScene
    body_of: np.ndarray          # body index per Gaussian, -1 for the floor
    transforms: list             # per body: list over t of (R 3x3, b 3) with x_t = R x_0 + b


def body_transforms(spec: SyntheticSceneSpec) -> list:
    """Per body and timestep the rigid map ``x_t = R x_0 + b`` from rest pose."""
    steps = spec.timesteps
    out = []
    for body in spec.bodies:
        c0 = np.asarray(body.center, dtype=np.float64)
        m = body.motion
        if m.kind == "static":
            rs = [np.eye(3)] * steps
            trans = [np.zeros(3)] * steps
        elif m.kind == "constant":
            w = np.asarray(m.angular_velocity, dtype=np.float64)
            v = np.asarray(m.velocity, dtype=np.float64)
            rs = [Rotation.from_rotvec(w * t).as_matrix() for t in range(steps)]
            trans = [v * t for t in range(steps)]
        else:
            keys = sorted(m.keyframes, key=lambda k: k["t"])
            kt = np.array([k["t"] for k in keys], dtype=np.float64)
            tr = CubicSpline(kt, np.array([k["translation"] for k in keys], dtype=np.float64))
            rot = RotationSpline(kt, Rotation.from_rotvec(np.array([k["rotvec"] for k in keys], dtype=np.float64)))
            ts = np.clip(np.arange(steps, dtype=np.float64), kt[0], kt[-1])
            rs = list(rot(ts).as_matrix())
            trans = list(tr(ts) - tr(kt[0]))
            r0 = rs[0].T
            rs = [r @ r0 for r in rs]
        out.append([(r, c0 + d - r @ c0) for r, d in zip(rs, trans)])
    h = spec.hinge
    if h is not None:
        pivot = np.asarray(h.pivot, dtype=np.float64)
        axis = np.asarray(h.axis, dtype=np.float64)
        axis /= np.linalg.norm(axis)
        chained = []
        for t in range(steps):
            ang = h.amplitude * np.sin(2 * np.pi * t / h.period) + h.rate * t
            rh = Rotation.from_rotvec(axis * ang).as_matrix()
            bh = pivot - rh @ pivot
            rp, bp = out[h.parent][t]
            rc, bc = out[h.child][t]
            # child's own motion, then the hinge, then the parent's motion
            r = rp @ rh @ rc
            b = rp @ (rh @ bc + bh) + bp
            chained.append((r, b))
        out[h.child] = chained
    return out


def build_ground_truth(spec: SyntheticSceneSpec) -> GroundTruth:
    rng = np.random.default_rng([spec.seed, 11])
    centers, rots, scales, colors, body_of, fg = [], [], [], [], [], []
    for k, body in enumerate(spec.bodies):
        if body.kind == "box":
            local, normals, area = _sample_box(rng, body.size, body.n_gaussians)
        else:
            local, normals, area = _sample_sphere(rng, body.size[0], body.n_gaussians)
        m = local.shape[0]
        tangential = 0.55 * np.sqrt(area / m)
        frame = _frame_from_normal(normals)
        centers.append(local + np.asarray(body.center))
        rots.append(rotmat_to_quat(frame))
        scales.append(np.tile([tangential, tangential, body.thickness * tangential], (m, 1)))
        colors.append(_checker(local, body.checker, body.colors))
        body_of.append(np.full(m, k))
        fg.append(np.ones(m, bool))
    if spec.floor is not None:
        f = spec.floor
        g = f.grid
        s = np.linspace(-f.half_size, f.half_size, g)
        xx, yy = np.meshgrid(s, s)
        pts = np.stack([xx.ravel(), yy.ravel(), np.full(g * g, f.height)], axis=1)
        pts[:, :2] += rng.uniform(-0.1, 0.1, (g * g, 2)) * (s[1] - s[0])
        spacing = 2 * f.half_size / (g - 1)
        centers.append(pts)
        rots.append(np.tile([1.0, 0.0, 0.0, 0.0], (g * g, 1)))
        scales.append(np.tile([0.6 * spacing, 0.6 * spacing, 0.1 * spacing], (g * g, 1)))
        colors.append(_checker(pts, f.checker, f.colors))
        body_of.append(np.full(g * g, -1))
        fg.append(np.zeros(g * g, bool))
    c0 = np.concatenate(centers)
    q0 = np.concatenate(rots)
    body_of = np.concatenate(body_of)
    fg = np.concatenate(fg)
    scene = GaussianScene([c0], [q0], np.log(np.concatenate(scales)), np.concatenate(colors),
                          np.full(c0.shape[0], 3.0), np.where(fg, 6.0, -6.0))
    transforms = body_transforms(spec)
    for t in range(1, spec.timesteps):
        ct, qt = c0.copy(), q0.copy()
        for k, tf in enumerate(transforms):
            sel = body_of == k
            r, b = tf[t]
            ct[sel] = c0[sel] @ r.T + b
            qr = rotmat_to_quat(r)
            qt[sel] = quat_multiply(np.broadcast_to(qr, (int(sel.sum()), 4)), q0[sel])
        scene.append_timestep(ct, qt)
    return GroundTruth(scene, body_of, transforms)


def camera_rig(spec: CameraRigSpec) -> list:
    """Train cameras then test cameras on a hemisphere, looking at the target."""
    total = spec.n_train + spec.n_test
    f = 0.5 * spec.width / np.tan(0.5 * np.deg2rad(spec.fov))
    lo, hi = np.deg2rad(spec.elevation)
    cams = []
    golden = np.pi * (3 - 5 ** 0.5)
    for k in range(total):
        frac = (k + 0.5) / total
        elev = lo + (hi - lo) * ((k * 0.618034) % 1.0)
        az = k * golden + 0.3 * frac
        eye = np.asarray(spec.target) + spec.radius * np.array(
            [np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        cams.append(CameraModel.look_at(eye, spec.target, [0.0, 0.0, 1.0], f, f, spec.width, spec.height))
    # spread the test views evenly over the spiral
    test_idx = set(np.floor((np.arange(spec.n_test) + 0.5) * total / max(spec.n_test, 1)).astype(int).tolist())
    train_k = test_k = 0
    for k, cam in enumerate(cams):
        if k in test_idx:
            cam.name, test_k = f"test{test_k:02d}", test_k + 1
        else:
            cam.name, train_k = f"train{train_k:02d}", train_k + 1
    return sorted(cams, key=lambda c: (c.name.startswith("test"), c.name))


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------

def _sample_surface_queries(gt: GroundTruth, cams, renders, count, rng, t=0):
    """Unproject foreground pixels of the GT depth maps and keep the ones with a GT anchor."""
    if count == 0 or not cams:
        return np.zeros((0, 3)), np.zeros(0, np.int64), [], np.zeros((0, 2), np.int64)
    cand, cam_of, pix = [], [], []
    for cam in cams:
        out = renders[(cam.name, t)]
        rows, cols = np.nonzero((out.alpha >= 0.5) & (out.fg >= 0.5 * out.alpha))
        for r, c in zip(rows, cols):
            d = out.depth[r, c] / out.alpha[r, c]
            cand.append(camera_to_world(cam, d * pixel_ray(cam, (c, r))))
            cam_of.append(cam.name)
            pix.append((c, r))
    if not cand:
        return np.zeros((0, 3)), np.zeros(0, np.int64), [], np.zeros((0, 2), np.int64)
    cand = np.asarray(cand)
    pix = np.asarray(pix, dtype=np.int64)
    anchors = most_influential_gaussians(gt.scene, t, cand)
    ok = np.flatnonzero(anchors >= 0)
    pick = np.sort(rng.permutation(ok)[:count])
    return cand[pick], anchors[pick], [cam_of[i] for i in pick], pix[pick]


def gt_track_set(gt: GroundTruth, points, anchors) -> TrackSet:
    steps = gt.scene.timesteps
    m = len(points)
    pos = np.zeros((m, steps, 3))
    rot = np.zeros((m, steps, 4))
    for k in range(m):
        body = gt.body_of[anchors[k]]
        for t in range(steps):
            r, b = gt.transforms[body][t]
            pos[k, t] = r @ points[k] + b
            rot[k, t] = rotmat_to_quat(r)
        pos[k, 0] = points[k]
    return TrackSet(np.asarray(anchors, dtype=np.int64), np.zeros(m, np.int64), pos, rot)


def generate_synthetic_scene(spec: SyntheticSceneSpec, out_dir) -> GroundTruth:
    """Write a complete dataset for ``spec`` into ``out_dir`` and return the ground truth."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = build_ground_truth(spec)
    cams = camera_rig(spec.cameras)
    background = np.asarray(spec.background, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, 23])
    renders = {}
    frames = []
    calib_truth = {}
    for cam in cams:
        if spec.color_perturbation > 0 and cam.name.startswith("train"):
            scale = 1.0 + rng.normal(0.0, spec.color_perturbation, 3)
            offset = rng.normal(0.0, 0.5 * spec.color_perturbation, 3)
        else:
            scale, offset = np.ones(3), np.zeros(3)
        calib_truth[cam.name] = {"scale": scale.tolist(), "offset": offset.tolist()}
        for t in range(spec.timesteps):
            r = rasterize(gt.scene, t, cam, background)
            renders[(cam.name, t)] = r
            img = r.color * scale + offset
            if spec.noise > 0:
                img = img + rng.normal(0.0, spec.noise, img.shape)
            img_path = f"images/{cam.name}/{t:04d}.png"
            mask_path = f"masks/{cam.name}/{t:04d}.png"
            write_image(out / img_path, np.clip(img, 0.0, 1.0))
            write_mask(out / mask_path, r.fg >= 0.5)
            frames.append({"t": t, "camera": cam.name, "image": img_path, "mask": mask_path})

    # initial point cloud: (subsampled) GT centers at t=0 with jitter
    n = gt.scene.n
    keep = np.sort(rng.permutation(n)[: max(1, int(round(spec.init_fraction * n)))])
    pts = gt.scene.centers[0][keep] + rng.normal(0.0, spec.init_jitter, (keep.size, 3))
    write_ply(out / "init_points.ply", pts, gt.scene.colors[keep],
              extra={"fg": gt.scene.foreground_mask()[keep].astype(np.uint8)}, position_dtype="double")

    save_checkpoint(gt.scene, out / "gt_scene.dgs", metadata={"body_of": gt.body_of.tolist()})

    train = [c for c in cams if c.name.startswith("train")]
    test = [c for c in cams if c.name.startswith("test")]
    pts3, anc3, _, _ = _sample_surface_queries(gt, train, renders, spec.n_tracks_3d, rng)
    tracks_3d = gt_track_set(gt, pts3, anc3)
    # 2D queries come from integer pixels of the test views
    pts2, anc2, cam2, pix2 = _sample_surface_queries(gt, test, renders, spec.n_tracks_2d, rng)
    tracks_2d = gt_track_set(gt, pts2, anc2)
    by_name = {c.name: c for c in cams}
    uv = np.zeros((tracks_2d.m, tracks_2d.timesteps, 2))
    vis = np.zeros((tracks_2d.m, tracks_2d.timesteps), bool)
    for k in range(tracks_2d.m):
        cam = by_name[cam2[k]]
        for t in range(tracks_2d.timesteps):
            u, v = visibility(tracks_2d.positions[k, t][None], cam, renders[(cam.name, t)])
            uv[k, t], vis[k, t] = u[0], v[0]
    gt_tracks = {
        "format": "dyngauss-gt-tracks", "version": 1,
        "tracks_3d": tracks_3d.to_json(),
        "tracks_2d": {"query_camera": cam2, "query_pixel": pix2.tolist(), "uv": uv.tolist(),
                      "visible": vis.tolist(), "tracks": tracks_2d.to_json()},
        "scene_diameter": scene_diameter(gt.scene),
    }
    (out / "gt_tracks.json").write_text(json.dumps(gt_tracks, sort_keys=True))
    (out / "gt_calibration.json").write_text(json.dumps(calib_truth, indent=2, sort_keys=True))
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))

    manifest = {
        "format": "dyngauss-dataset", "version": 1, "timesteps": spec.timesteps,
        "background": background.tolist(),
        "cameras": [{"id": c.name, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width,
                     "height": c.height, "split": "train" if c.name.startswith("train") else "test",
                     "extrinsic": c.extrinsic.tolist()} for c in cams],
        "frames": frames,
        "init_point_cloud": "init_points.ply",
        "gt_tracks": "gt_tracks.json",
        "gt_scene": "gt_scene.dgs",
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return gt


def scene_diameter(scene: GaussianScene, t: int = 0) -> float:
    """Largest distance between two Gaussian centers (via the convex hull)."""
    from scipy.spatial import ConvexHull
    from scipy.spatial.distance import pdist

    pts = scene.centers[t]
    if len(pts) > 4:
        pts = pts[ConvexHull(pts).vertices]
    return float(pdist(pts).max()) if len(pts) > 1 else 0.0


@dataclass
class GroundTruthTracks:
    tracks_3d: TrackSet
    tracks_2d: TrackSet
    query_camera: list
    query_pixel: np.ndarray
    uv: np.ndarray
    visible: np.ndarray
    scene_diameter: float


def load_gt_tracks(path) -> GroundTruthTracks:
    d = json.loads(Path(path).read_text())
    t2 = d["tracks_2d"]
    return GroundTruthTracks(TrackSet.from_json(d["tracks_3d"]), TrackSet.from_json(t2["tracks"]),
                             list(t2["query_camera"]), np.asarray(t2["query_pixel"], dtype=np.int64).reshape(-1, 2),
                             np.asarray(t2["uv"], dtype=np.float64).reshape(-1, d["tracks_3d"]["timesteps"], 2),
                             np.asarray(t2["visible"], dtype=bool).reshape(-1, d["tracks_3d"]["timesteps"]),
                             float(d["scene_diameter"]))
