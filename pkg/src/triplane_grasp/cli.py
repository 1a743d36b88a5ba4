"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 bad arguments, 3 unreadable input, 4 numerical or
feasibility failure. Failures print a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .gaussians import load_gaussians_ply
from .geometry import CameraModel, PointCloud, estimate_normals, normalize_cloud, resample_cloud
from .grasping import GripperModel, SegmentMask, grasps_to_json, plan_grasps
from .losses import LossConfig, composite_loss
from .pipeline import OracleReconstructor, PipelineConfig, evaluate, reconstruct
from .plyio import read_cloud
from .renderer import Image, render, render_naive
from .scene import SceneDescriptor, builtin_fixtures, load_scene_list
from .triplane import load_triplane, query_batch

MANIFEST_SCHEMA = 1
EXIT_OK, EXIT_ARGS, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str, kind: str = "error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_ARGS, f"{self.prog}: {message}", "usage")


def _load(what: str, fn, *args):
    """Run an input loader, mapping any failure to the parse-error exit code."""
    try:
        return fn(*args)
    except CliError:
        raise
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read {what}: {exc}", "input") from exc


def _read_json(path):
    return json.loads(Path(path).read_text())


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def _write_manifest(args, config: dict, seeds: dict, inputs: dict, outputs: dict, timings: dict,
                    out: Path, is_dir: bool) -> None:
    doc = {
        "schema_version": MANIFEST_SCHEMA,
        "command": args.command,
        "argv": [str(a) for a in args.argv],
        "config_hash": _config_hash(config),
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "versions": {"triplane_grasp": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "timings": timings,
    }
    _manifest_path(out, is_dir).write_text(_dumps(doc))


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        doc = _load("config", _read_json, args.config)
        cfg = _load("config", PipelineConfig.from_dict, doc)
    return cfg


def cmd_reconstruct(args) -> int:
    cfg = _pipeline_config(args)
    overrides = {k: getattr(args, k) for k in ("seed", "noise_sigma", "dropout") if getattr(args, k) is not None}
    cfg = PipelineConfig.from_dict({**cfg.to_dict(), **overrides})
    t0 = time.perf_counter()
    if args.scene:
        source = _load("scene", SceneDescriptor.load, args.scene)
        rec_impl = OracleReconstructor(cfg.coarse_points, cfg.noise_sigma, cfg.dropout, cfg.seed)
    else:
        source = _load("cloud", read_cloud, args.cloud)
        rec_impl = _LoadedCloud(source)
    rec = reconstruct(source, rec_impl, cfg)
    out = Path(args.out)
    paths = rec.save(out)
    timings = {**rec.timings, "total": time.perf_counter() - t0}
    _write_manifest(args, cfg.to_dict(), {"seed": cfg.seed}, {"scene": args.scene, "cloud": args.cloud},
                    paths, timings, out, True)
    return EXIT_OK


class _LoadedCloud:
    """Reconstructor over a cloud that was already read (so read errors map to exit 3)."""

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud

    def reconstruct(self, source=None):
        return PointCloud(self.cloud.points), np.zeros(len(self.cloud), dtype=np.int64)


def cmd_render(args) -> int:
    gs = _load("gaussians", load_gaussians_ply, args.gaussians)
    cam = _load("camera", lambda p: CameraModel.from_dict(_read_json(p)), args.camera)
    t0 = time.perf_counter()
    fn = render_naive if args.naive else render
    img = fn(gs, cam, background=tuple(args.background))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    img.save_png(out)
    _write_manifest(args, {"background": list(args.background), "naive": args.naive, "camera": cam.to_dict()},
                    {}, {"gaussians": args.gaussians, "camera": args.camera}, {"image": out},
                    {"total": time.perf_counter() - t0, **{k: v for k, v in img.diagnostics.items()}}, out, False)
    return EXIT_OK


def cmd_grasp(args) -> int:
    cloud = _load("cloud", read_cloud, args.cloud)
    mask = None
    if args.mask:
        mask = _load("mask", lambda p: SegmentMask.from_dict(_read_json(p), len(cloud)), args.mask)
        if len(mask.labels) != len(cloud):
            raise CliError(EXIT_INPUT, f"mask has {len(mask.labels)} labels for {len(cloud)} points", "input")
    gripper = GripperModel()
    if args.gripper:
        gripper = _load("gripper", lambda p: GripperModel.from_dict(_read_json(p)), args.gripper)
    t0 = time.perf_counter()
    if cloud.normals is None:
        cloud = estimate_normals(cloud, k=min(16, len(cloud)))
    plan = plan_grasps(cloud, mask, gripper, args.mu, args.top_k, args.seed, args.max_grasps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(grasps_to_json(plan, plan.diagnostics))
    config = {"gripper": gripper.to_dict(), "mu": args.mu, "top_k": args.top_k, "max_grasps": args.max_grasps}
    _write_manifest(args, config, {"seed": args.seed}, {"cloud": args.cloud, "mask": args.mask,
                                                        "gripper": args.gripper},
                    {"grasps": out}, {"total": time.perf_counter() - t0}, out, False)
    if not plan:
        raise CliError(EXIT_NUMERIC, "no feasible grasp", "infeasible")
    return EXIT_OK


def _image_pairs(dir_a, dir_b):
    a, b = Path(dir_a), Path(dir_b)
    names_a = sorted(p.name for p in a.glob("*.png"))
    names_b = sorted(p.name for p in b.glob("*.png"))
    if names_a != names_b:
        raise ValueError(f"image sets differ: {names_a} vs {names_b}")
    if not names_a:
        raise ValueError("no PNG images found")
    return [Image.load_png(a / n) for n in names_a], [Image.load_png(b / n) for n in names_b]


def cmd_metrics(args) -> int:
    pred = _load("pred", read_cloud, args.pred)
    gt = _load("gt", read_cloud, args.gt)
    rendered, views = [], []
    if args.images:
        rendered, views = _load("images", _image_pairs, *args.images)
    t0 = time.perf_counter()
    a = resample_cloud(normalize_cloud(PointCloud(pred.points))[0], args.points, seed=args.seed)
    b = resample_cloud(normalize_cloud(PointCloud(gt.points))[0], args.points, seed=args.seed)
    config = LossConfig(fscore_threshold=args.threshold)
    emd_points = args.emd_points if args.emd_points > 0 else None
    report = composite_loss(config, a, b, rendered, views, emd_points=emd_points)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    _write_manifest(args, {"loss": config.to_dict(), "points": args.points, "emd_points": args.emd_points},
                    {"seed": args.seed}, {"pred": args.pred, "gt": args.gt}, {"report": out},
                    {"total": time.perf_counter() - t0}, out, False)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.scenes == "builtin":
        scenes = builtin_fixtures()
    else:
        scenes = _load("scene list", load_scene_list, args.scenes)
    cfg = _pipeline_config(args)
    t0 = time.perf_counter()
    result = evaluate(scenes, cfg, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.json", "table": out / "table.txt", "timings": out / "timings.json"}
    paths["results"].write_text(result.to_json())
    paths["table"].write_text(result.table())
    paths["timings"].write_text(_dumps(result.timings()))
    _write_manifest(args, cfg.to_dict(), {"seed": cfg.seed, "gt_seed": cfg.gt_seed}, {"scenes": args.scenes,
                                                                                     "config": args.config},
                    paths, {"total": time.perf_counter() - t0}, out, True)
    if not args.quiet:
        sys.stdout.write(result.table())
    return EXIT_OK


def cmd_query(args) -> int:
    tri = _load("triplane", load_triplane, args.triplane)
    cloud = _load("points", read_cloud, args.points)
    t0 = time.perf_counter()
    feats = query_batch(tri, cloud.points)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(np.ascontiguousarray(feats, dtype="<" + args.dtype).tobytes())
    _write_manifest(args, {"dtype": args.dtype, "shape": list(feats.shape)}, {},
                    {"triplane": args.triplane, "points": args.points}, {"features": out},
                    {"total": time.perf_counter() - t0}, out, False)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="triplane-grasp", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="worker threads for batch stages (default 1)")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("reconstruct", help="scene or cloud -> coarse/dense clouds, triplane, Gaussians")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene descriptor JSON (sampled by the oracle reconstructor)")
    src.add_argument("--cloud", help="precomputed coarse cloud PLY")
    r.add_argument("--config", help="pipeline config JSON")
    r.add_argument("--seed", type=int, help="overrides the config seed")
    r.add_argument("--noise-sigma", dest="noise_sigma", type=float, help="oracle noise std in metres")
    r.add_argument("--dropout", type=float, help="oracle view-dependent dropout fraction")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_reconstruct)

    q = sub.add_parser("render", help="splat a Gaussian PLY through a camera into a PNG")
    q.add_argument("--gaussians", required=True, help="Gaussian PLY")
    q.add_argument("--camera", required=True, help="camera JSON (fx, fy, cx, cy, width, height, extrinsic)")
    q.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("R", "G", "B"))
    q.add_argument("--naive", action="store_true", help="use the per-splat reference compositor")
    q.add_argument("--out", required=True, help="output PNG")
    q.set_defaults(func=cmd_render)

    g = sub.add_parser("grasp", help="plan antipodal parallel-jaw grasps on a cloud")
    g.add_argument("--cloud", required=True, help="scene cloud PLY (normals estimated if absent)")
    g.add_argument("--mask", help="segment mask JSON with 'labels' or 'target_indices'")
    g.add_argument("--gripper", help="gripper geometry JSON")
    g.add_argument("--mu", type=float, default=1.0, help="friction coefficient (default 1.0)")
    g.add_argument("--top-k", dest="top_k", type=int, default=10, help="grasps to keep (default 10)")
    g.add_argument("--max-grasps", dest="max_grasps", type=int, default=256, help="sampler budget (default 256)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output grasps JSON")
    g.set_defaults(func=cmd_grasp)

    m = sub.add_parser("metrics", help="CD/EMD/F-score (and image terms) between two clouds")
    m.add_argument("--pred", required=True, help="predicted cloud PLY")
    m.add_argument("--gt", required=True, help="reference cloud PLY")
    m.add_argument("--images", nargs=2, metavar=("DIR_A", "DIR_B"), help="rendered vs reference PNG folders")
    m.add_argument("--points", type=int, default=16384, help="resample size after normalization")
    m.add_argument("--emd-points", dest="emd_points", type=int, default=512,
                   help="FPS subset size for EMD; 0 uses all points")
    m.add_argument("--threshold", type=float, default=0.02, help="F-score distance threshold")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help="output report JSON")
    m.set_defaults(func=cmd_metrics)

    e = sub.add_parser("eval", help="evaluate a list of synthetic scenes")
    e.add_argument("--scenes", required=True, help="JSON list of scene descriptors or paths, or 'builtin' for the shipped fixtures")
    e.add_argument("--config", help="pipeline config JSON")
    e.add_argument("--quiet", action="store_true", help="do not print the table")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("query", help="debug: triplane features at points")
    t.add_argument("--triplane", required=True, help="triplane header JSON (or its .bin payload)")
    t.add_argument("--points", required=True, help="points PLY")
    t.add_argument("--dtype", choices=("f4", "f8"), default="f4", help="output float width")
    t.add_argument("--out", required=True, help="raw little-endian row-major (M, 3C) floats")
    t.set_defaults(func=cmd_query)
    return p


def _fail(command, exc: CliError) -> int:
    sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc), "exit_code": exc.code,
                                 "command": command}) + "\n")
    return exc.code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        args.argv = argv
        if args.threads < 1:
            raise CliError(EXIT_ARGS, "--threads must be at least 1", "usage")
        return args.func(args)
    except CliError as exc:
        return _fail(command, exc)
    except (FloatingPointError, ValueError, RuntimeError, ArithmeticError) as exc:
        return _fail(command, CliError(EXIT_NUMERIC, f"{type(exc).__name__}: {exc}", "numerical"))
    except OSError as exc:
        return _fail(command, CliError(EXIT_INPUT, f"{type(exc).__name__}: {exc}", "io"))


if __name__ == "__main__":
    sys.exit(main())
