"""Multi-view dataset layout, loading and PLY point clouds.

A dataset directory holds ``manifest.json``, RGB PNG images, optional
single-channel PNG foreground masks, and an initial point cloud in PLY::

    {
      "format": "dyngauss-dataset", "version": 1,
      "timesteps": 10, "background": [0, 0, 0],
      "cameras": [{"id": "cam00", "fx": 80, "fy": 80, "cx": 31.5, "cy": 31.5,
                   "width": 64, "height": 64, "split": "train",
                   "extrinsic": [[...], [...], [...]],        # 3x4 world-to-camera
                   "extrinsics": [[[...]...], ...]}],           # optional, one 3x4 per timestep
      "frames": [{"t": 0, "camera": "cam00", "image": "images/cam00/0000.png",
                  "mask": "masks/cam00/0000.png"}, ...],
      "init_point_cloud": "init_points.ply",
      "gt_tracks": "gt_tracks.json",                            # optional
      "gt_scene": "gt_scene.dgs"                                 # optional
    }

Masks mark foreground with white; they are binarized at 0.5.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .gaussians import CameraModel

MANIFEST_NAME = "manifest.json"

_MAT34 = {"type": "array", "minItems": 3, "maxItems": 3,
          "items": {"type": "array", "minItems": 4, "maxItems": 4, "items": {"type": "number"}}}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "timesteps", "cameras", "frames", "init_point_cloud"],
    "properties": {
        "format": {"const": "dyngauss-dataset"},
        "version": {"const": 1},
        "timesteps": {"type": "integer", "minimum": 1},
        "background": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}},
        "cameras": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "fx", "fy", "cx", "cy", "width", "height", "split", "extrinsic"],
                "properties": {
                    "id": {"type": "string"},
                    "fx": {"type": "number", "exclusiveMinimum": 0},
                    "fy": {"type": "number", "exclusiveMinimum": 0},
                    "cx": {"type": "number"}, "cy": {"type": "number"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "split": {"enum": ["train", "test"]},
                    "extrinsic": _MAT34,
                    "extrinsics": {"type": "array", "items": _MAT34},
                },
            },
        },
        "frames": {
            "type": "array",
            "items": {
                "type": "object", "required": ["t", "camera", "image"],
                "properties": {"t": {"type": "integer", "minimum": 0}, "camera": {"type": "string"},
                               "image": {"type": "string"}, "mask": {"type": "string"}},
            },
        },
        "init_point_cloud": {"type": "string"},
        "gt_tracks": {"type": "string"},
        "gt_scene": {"type": "string"},
    },
}


class DataError(RuntimeError):
    """A file referenced by the dataset is missing or unreadable."""


class ManifestValidationError(ValueError):
    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.field_path = path


# ----------------------------------------------------------------------------
# PLY
# ----------------------------------------------------------------------------

_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1",
              "uint8": "u1", "char": "i1", "int": "i4", "int32": "i4", "uint": "u4", "short": "i2",
              "ushort": "u2"}


def write_ply(path, points, colors, extra: dict | None = None, position_dtype: str = "float") -> None:
    """Binary little-endian PLY with x/y/z, red/green/blue (uchar) and optional uchar extras.

    ``colors`` are floats in [0, 1]; they are clamped and rounded to bytes.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    rgb = np.clip(np.round(np.asarray(colors, dtype=np.float64).reshape(n, 3) * 255.0), 0, 255)
    extra = extra or {}
    pdt = _PLY_TYPES[position_dtype]
    dtype = [("x", "<" + pdt), ("y", "<" + pdt), ("z", "<" + pdt),
             ("red", "u1"), ("green", "u1"), ("blue", "u1")] + [(k, "u1") for k in extra]
    rec = np.empty(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    for k, v in extra.items():
        rec[k] = np.asarray(v).astype(np.uint8)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {position_dtype} {a}" for a in "xyz"]
    header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header += [f"property uchar {k}" for k in extra]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> dict:
    """Vertex properties of a binary little-endian or ASCII PLY as a dict of arrays."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt, count, props, in_vertex = None, 0, [], False
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt == "binary_little_endian":
        rec = np.frombuffer(data, dtype=[(nm, "<" + t) for nm, t in props], count=count, offset=body_start)
        return {nm: np.array(rec[nm]) for nm, _ in props}
    if fmt == "ascii":
        rows = np.loadtxt(data[body_start:].decode("ascii").splitlines()[:count], ndmin=2)
        return {nm: rows[:, k].astype(t) for k, (nm, t) in enumerate(props)}
    raise DataError(f"{path}: unsupported PLY format {fmt}")


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    fg: np.ndarray | None = None

    @classmethod
    def from_ply(cls, path) -> "PointCloud":
        v = read_ply(path)
        points = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
        fg = v["fg"].astype(bool) if "fg" in v else None
        return cls(points, colors, fg)


def export_ply(scene, t: int, path) -> None:
    """Centers and colors of every Gaussian at timestep ``t``."""
    scene.check_timestep(t)
    try:
        write_ply(path, scene.centers[t], scene.colors)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# images
# ----------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc
    return arr / 255.0


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc
    return (arr / 255.0 >= 0.5).astype(np.float64)


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def write_mask(path, mask) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(np.asarray(mask) >= 0.5, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


# ----------------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------------

@dataclass
class CameraEntry:
    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    split: str
    extrinsic: np.ndarray
    extrinsics: np.ndarray | None = None

    def model(self, t: int = 0) -> CameraModel:
        ext = self.extrinsic if self.extrinsics is None else self.extrinsics[t]
        return CameraModel(self.fx, self.fy, self.cx, self.cy, ext, self.width, self.height, name=self.id)

    def to_json(self) -> dict:
        out = {"id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
               "width": self.width, "height": self.height, "split": self.split,
               "extrinsic": np.asarray(self.extrinsic).tolist()}
        if self.extrinsics is not None:
            out["extrinsics"] = np.asarray(self.extrinsics).tolist()
        return out


@dataclass
class DatasetManifest:
    root: Path
    cameras: list
    frames: dict            # (camera id, t) -> (image path, mask path | None)
    init_point_cloud: Path
    timesteps: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gt_tracks: Path | None = None
    gt_scene: Path | None = None


def _validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(MANIFEST_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ManifestValidationError(err.message, path)


def parse_manifest(root, raw: dict) -> DatasetManifest:
    root = Path(root)
    _validate(raw)
    steps = raw["timesteps"]
    cameras = []
    for k, c in enumerate(raw["cameras"]):
        ext_t = None
        if "extrinsics" in c:
            ext_t = np.asarray(c["extrinsics"], dtype=np.float64)
            if ext_t.shape[0] != steps:
                raise ManifestValidationError("needs one extrinsic per timestep", f"cameras/{k}/extrinsics")
        cameras.append(CameraEntry(c["id"], float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                   int(c["width"]), int(c["height"]), c["split"],
                                   np.asarray(c["extrinsic"], dtype=np.float64), ext_t))
    ids = [c.id for c in cameras]
    if len(set(ids)) != len(ids):
        raise ManifestValidationError("duplicate camera ids", "cameras")
    if not any(c.split == "train" for c in cameras):
        raise ManifestValidationError("at least one train camera required", "cameras")
    frames = {}
    for k, fr in enumerate(raw["frames"]):
        if fr["camera"] not in ids:
            raise ManifestValidationError(f"unknown camera {fr['camera']!r}", f"frames/{k}/camera")
        if fr["t"] >= steps:
            raise ManifestValidationError(f"timestep {fr['t']} >= {steps}", f"frames/{k}/t")
        frames[(fr["camera"], fr["t"])] = (root / fr["image"], root / fr["mask"] if "mask" in fr else None)
    for cid in ids:
        for t in range(steps):
            if (cid, t) not in frames:
                raise ManifestValidationError(f"camera {cid} has no frame for t={t}", "frames")
    return DatasetManifest(
        root=root, cameras=cameras, frames=frames, init_point_cloud=root / raw["init_point_cloud"],
        timesteps=steps, background=np.asarray(raw.get("background", [0, 0, 0]), dtype=np.float64),
        gt_tracks=root / raw["gt_tracks"] if "gt_tracks" in raw else None,
        gt_scene=root / raw["gt_scene"] if "gt_scene" in raw else None)


class Dataset:
    """Cameras, images, masks and the initial point cloud of one capture.

    Either backed by a manifest on disk (images decoded lazily and cached) or
    by in-memory arrays (see :meth:`from_arrays`).
    """

    def __init__(self, cameras: list, timesteps: int, background=(0.0, 0.0, 0.0),
                 image_source=None, mask_source=None, point_cloud: PointCloud | None = None,
                 manifest: DatasetManifest | None = None):
        self.entries = {c.id: c for c in cameras}
        self.camera_ids = [c.id for c in cameras]
        self.timesteps = timesteps
        self.background = np.asarray(background, dtype=np.float64)
        self._image_source = image_source
        self._mask_source = mask_source
        self._point_cloud = point_cloud
        self.manifest = manifest
        self._cache = {}

    @property
    def train_cameras(self) -> list:
        return [c for c in self.camera_ids if self.entries[c].split == "train"]

    @property
    def test_cameras(self) -> list:
        return [c for c in self.camera_ids if self.entries[c].split == "test"]

    def camera(self, name: str, t: int = 0) -> CameraModel:
        if name not in self.entries:
            raise KeyError(f"unknown camera {name!r}")
        return self.entries[name].model(t)

    def image(self, name: str, t: int) -> np.ndarray:
        key = ("img", name, t)
        if key not in self._cache:
            self._cache[key] = self._image_source(name, t)
        return self._cache[key]

    def mask(self, name: str, t: int):
        if self._mask_source is None:
            return None
        key = ("mask", name, t)
        if key not in self._cache:
            self._cache[key] = self._mask_source(name, t)
        return self._cache[key]

    def point_cloud(self) -> PointCloud:
        if self._point_cloud is None:
            if self.manifest is None:
                raise DataError("dataset has no initial point cloud")
            if not self.manifest.init_point_cloud.exists():
                raise DataError(f"missing file: {self.manifest.init_point_cloud}")
            self._point_cloud = PointCloud.from_ply(self.manifest.init_point_cloud)
        return self._point_cloud

    def vote_foreground(self, points, names) -> np.ndarray:
        """Foreground flag per point by majority vote over the t=0 masks it projects into."""
        votes = np.zeros(len(points))
        seen = np.zeros(len(points))
        for name in names:
            mask = self.mask(name, 0)
            if mask is None:
                continue
            cam = self.camera(name, 0)
            pc = points @ cam.rotation.T + cam.translation
            ok = pc[:, 2] > 1e-6
            z = np.where(ok, pc[:, 2], 1.0)
            u = np.round(cam.fx * pc[:, 0] / z + cam.cx).astype(int)
            v = np.round(cam.fy * pc[:, 1] / z + cam.cy).astype(int)
            ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            votes[ok] += mask[v[ok], u[ok]]
            seen[ok] += 1
        return np.where(seen > 0, votes > 0.5 * seen, True)

    @classmethod
    def from_arrays(cls, cameras: list, images: dict, masks: dict | None = None,
                    point_cloud: PointCloud | None = None, background=(0.0, 0.0, 0.0)) -> "Dataset":
        """``images[(camera id, t)] -> (H, W, 3)`` float array; ``masks`` likewise ``(H, W)``."""
        steps = 1 + max(t for _, t in images)
        mask_src = None if masks is None else (lambda n, t: masks.get((n, t)))
        return cls(cameras, steps, background, lambda n, t: images[(n, t)], mask_src, point_cloud)


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / MANIFEST_NAME if root.is_dir() else root
    root = mpath.parent
    if not mpath.exists():
        raise DataError(f"missing file: {mpath}")
    raw = json.loads(mpath.read_text())
    manifest = parse_manifest(root, raw)
    missing = [str(p) for pair in manifest.frames.values() for p in pair if p is not None and not p.exists()]
    if not manifest.init_point_cloud.exists():
        missing.insert(0, str(manifest.init_point_cloud))
    if missing:
        raise DataError(f"missing file: {missing[0]}")

    def image_source(name, t):
        return read_image(manifest.frames[(name, t)][0])

    has_masks = any(m is not None for _, m in manifest.frames.values())

    def mask_source(name, t):
        m = manifest.frames[(name, t)][1]
        return None if m is None else read_mask(m)

    return Dataset(manifest.cameras, manifest.timesteps, manifest.background, image_source,
                   mask_source if has_masks else None, manifest=manifest)
