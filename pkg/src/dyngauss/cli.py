"""Command-line entry point: ``dyngauss <subcommand> ...``.

Every subcommand exits 0 on success. On failure a single JSON object
``{"error": <kind>, "message": <text>[, "field_path": <path>]}`` is written
to stderr and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("dyngauss")

EXIT_ERROR = 1


def _json_out(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _camera_entries_from_metadata(meta):
    from .dataset import CameraEntry
    out = {}
    for c in meta.get("cameras", []):
        ext = np.asarray(c["extrinsic"], dtype=np.float64)
        exts = np.asarray(c["extrinsics"], dtype=np.float64) if "extrinsics" in c else None
        out[c["id"]] = CameraEntry(c["id"], c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"],
                                   c["split"], ext, exts)
    return out


def _resolve_camera(name, t, meta, data):
    """Camera ``name`` at ``t`` from ``--data`` if given, else from the checkpoint metadata."""
    if data is not None:
        from .dataset import load_dataset
        ds = load_dataset(data)
        return ds.camera(name, t), ds.background
    entries = _camera_entries_from_metadata(meta)
    if name not in entries:
        raise KeyError(f"unknown camera {name!r}; pass --data or use a checkpoint written by 'train'")
    return entries[name].model(t), np.asarray(meta.get("background", [0.0, 0.0, 0.0]))


def _load_points(path):
    from .dataset import read_ply
    p = Path(path)
    if p.suffix == ".ply":
        v = read_ply(p)
        return np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if p.suffix == ".npy":
        pts = np.load(p)
    elif p.suffix == ".json":
        pts = np.asarray(json.loads(p.read_text()), dtype=np.float64)
    else:
        pts = np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None, ndmin=2)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{path}: expected an (m, 3) array of points, got shape {pts.shape}")
    return pts


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_gen_synth(args):
    from .synthetic import SyntheticSceneSpec, generate_synthetic_scene
    spec = SyntheticSceneSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    gt = generate_synthetic_scene(spec, args.out)
    _json_out({"out": str(args.out), "gaussians": gt.scene.n, "timesteps": gt.scene.timesteps})


def cmd_train(args):
    from .dataset import load_dataset
    from .gaussians import save_checkpoint
    from .optimize import ProgressLog, RunConfig, train

    ds = load_dataset(args.data)
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    out = Path(args.out)
    meta = {"config": config.to_dict(), "cameras": [ds.entries[c].to_json() for c in ds.camera_ids],
            "background": ds.background.tolist()}

    def snapshot(t, scene, calibration):
        if args.checkpoint_dir:
            d = Path(args.checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(scene, d / f"t{t:04d}.dgs", calibration, meta)

    progress = ProgressLog()
    result = train(ds, config, progress, on_timestep=snapshot)
    save_checkpoint(result.scene, out, result.calibration, meta)
    progress_path = Path(args.progress) if args.progress else out.with_suffix(".progress.csv")
    progress.write_csv(progress_path)
    _json_out({"checkpoint": str(out), "progress": str(progress_path), "gaussians": result.scene.n,
               "timesteps": result.scene.timesteps})


def cmd_render(args):
    from .dataset import write_image
    from .gaussians import load_checkpoint
    from .optimize import apply_color_calibration
    from .rasterizer import rasterize

    scene, calibration, meta = load_checkpoint(args.checkpoint)
    cam, background = _resolve_camera(args.camera, args.t, meta, args.data)
    out = rasterize(scene, args.t, cam, background)
    color = out.color
    if args.camera in calibration and not args.no_calibration:
        color = apply_color_calibration(color, *calibration[args.camera])
    write_image(args.out, np.clip(color, 0.0, 1.0))
    depth_path = Path(args.out).with_suffix(".depth.npy")
    # raw depth: float32, (H, W), meters along the optical axis, 0 where nothing was hit
    np.save(depth_path, out.depth.astype(np.float32))
    _json_out({"image": str(args.out), "depth": str(depth_path)})


def cmd_track(args):
    from .gaussians import load_checkpoint
    from .rasterizer import rasterize
    from .tracking import project_tracks, track_points

    scene, _, meta = load_checkpoint(args.checkpoint)
    points = _load_points(args.points)
    tracks = track_points(scene, points, args.source_t)
    if args.camera:
        # projections assume a static rig: each camera's t=0 pose is used throughout
        cams = [_resolve_camera(name, 0, meta, args.data)[0] for name in args.camera]
        renders = {(cam.name, t): rasterize(scene, t, cam) for cam in cams for t in range(scene.timesteps)}
        tracks = project_tracks(tracks, cams, renders)
    tracks.save(args.out)
    _json_out({"tracks": str(args.out), "points": int(points.shape[0]),
               "anchored": int(np.sum(tracks.anchors >= 0))})


def cmd_eval(args):
    from .dataset import load_dataset
    from .gaussians import load_checkpoint
    from .metrics import write_report, write_table
    from .pipeline import evaluate
    from .synthetic import load_gt_tracks

    scene, calibration, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    gt_path = args.gt_tracks
    if gt_path is None:
        if ds.manifest is None or ds.manifest.gt_tracks is None:
            raise ValueError("no --gt-tracks given and the dataset manifest names none")
        gt_path = ds.manifest.gt_tracks
    gt = load_gt_tracks(gt_path)
    ev = evaluate(scene, ds, gt, calibration, sequence=args.sequence or Path(args.data).name)
    out = Path(args.out)
    write_report([ev.report], out)
    table = Path(args.table) if args.table else out.with_suffix(".csv")
    write_table([ev.report], table)
    _json_out({"report": str(out), "table": str(table)})


def cmd_export_ply(args):
    from .dataset import export_ply
    from .gaussians import load_checkpoint
    scene, _, _ = load_checkpoint(args.checkpoint)
    export_ply(scene, args.t, args.out)
    _json_out({"ply": str(args.out), "vertices": scene.n})


def cmd_gradcheck(args):
    from .gradcheck import LOSSES, PRIOR_LOSSES, default_camera, gradcheck, random_scene
    seed = 0 if args.seed is None else args.seed
    losses = LOSSES if args.loss == "all" else (args.loss,)
    reports = []
    for k in range(args.scenes):
        rng = np.random.default_rng([seed, k])
        scene = random_scene(rng, n=args.gaussians, timesteps=2)
        for loss in losses:
            t = 1 if loss in PRIOR_LOSSES else 0
            reports.append(gradcheck(scene, default_camera(args.size), loss, seed=seed + k, t=t,
                                     tolerance=args.tolerance).to_dict())
    summary = {"passed": all(r["passed"] for r in reports), "reports": reports}
    _json_out(summary, args.out)
    if not summary["passed"]:
        return EXIT_ERROR
    return 0


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyngauss", description="Dynamic 3D Gaussian reconstruction and tracking")
    p.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the parallel kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synth", help="generate a synthetic dataset with ground truth")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train", help="fit a dynamic scene to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None, help="run-config JSON (fields of RunConfig)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--progress", default=None, help="per-iteration loss CSV (default: <out>.progress.csv)")
    s.add_argument("--checkpoint-dir", default=None, help="also write a checkpoint after every timestep")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one view to PNG plus raw float32 depth")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--t", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--data", default=None, help="dataset to read the camera from")
    s.add_argument("--no-calibration", action="store_true", help="skip the per-camera color correction")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("track", help="track query points through every timestep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--points", required=True, help=".ply, .npy, .json or text file of (m, 3) points")
    s.add_argument("--out", required=True)
    s.add_argument("--source-t", type=int, default=0)
    s.add_argument("--camera", action="append", default=[], help="also project into this camera (repeatable)")
    s.add_argument("--data", default=None)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score a checkpoint against ground truth")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--gt-tracks", default=None)
    s.add_argument("--out", required=True, help="report JSON")
    s.add_argument("--table", default=None, help="summary CSV (default: <out>.csv)")
    s.add_argument("--sequence", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-ply", help="write Gaussian centers and colors at one timestep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_ply)

    s = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    s.add_argument("--scenes", type=int, default=3)
    s.add_argument("--gaussians", type=int, default=10)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--loss", default="all", choices=("all", "image", "channels", "rigid", "rot", "iso"))
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _error_kind(exc) -> str:
    from .dataset import DataError, ManifestValidationError
    from .gaussians import InvalidCallError, InvalidParameterError
    from .synthetic import SpecValidationError
    for cls, kind in ((ManifestValidationError, "validation_error"), (SpecValidationError, "validation_error"),
                      (DataError, "data_error"), (InvalidParameterError, "invalid_parameter"),
                      (InvalidCallError, "invalid_call"), (OSError, "io_error")):
        if isinstance(exc, cls):
            return kind
    return type(exc).__name__


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.threads is not None:
            import numba
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        code = args.func(args)
        return 0 if code is None else code
    except Exception as exc:  # every failure becomes one machine-readable line
        err = {"error": _error_kind(exc), "message": str(exc)}
        path = getattr(exc, "field_path", None)
        if path is not None:
            err["field_path"] = path
        print(json.dumps(err), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
