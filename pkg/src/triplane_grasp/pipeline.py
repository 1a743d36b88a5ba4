"""End-to-end orchestration: reconstruct -> densify -> triplane -> Gaussians -> grasps.

The learned image-to-point stage sits behind the :class:`Reconstructor`
interface. :class:`OracleReconstructor` samples a synthetic scene with
optional noise and view-dependent dropout; :class:`FileReconstructor` loads a
cloud produced elsewhere.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import DecoderWeights, GaussianSet, decode_gaussians
from .geometry import PointCloud, estimate_normals, normalize, normalize_cloud, resample_cloud
from .grasping import (Grasp, GraspPlan, GripperModel, SegmentMask, check_collision, friction_cone_score,
                       plan_grasps)
from .losses import LossConfig, chamfer_and_fscore, earth_mover_distance
from .scene import SceneDescriptor, line_contacts
from .triplane import Triplane, query_batch, synthesize_triplane

DEFAULT_VIEW = (1.0, -1.0, 1.0)


class Reconstructor(Protocol):
    def reconstruct(self, source) -> tuple[PointCloud, np.ndarray]:
        """Return a coarse cloud and integer per-point segment labels."""


@dataclass(frozen=True)
class OracleReconstructor:
    """Analytic surface samples standing in for a learned point decoder.

    ``dropout`` removes that fraction of the oversampled points that face
    away from ``view`` most strongly, mimicking a single-view observation.
    Noise is isotropic Gaussian with standard deviation ``noise_sigma``
    (metres). Labels are primitive indices.
    """

    n_points: int = 2048
    noise_sigma: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    view: tuple = DEFAULT_VIEW

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def reconstruct(self, source: SceneDescriptor):
        if not isinstance(source, SceneDescriptor):
            raise TypeError("OracleReconstructor needs a SceneDescriptor")
        total = int(math.ceil(self.n_points / (1.0 - self.dropout)))
        cloud, labels = source.sample(total, seed=self.seed)
        keep = np.arange(total)
        if total > self.n_points:
            facing = cloud.normals @ normalize(np.asarray(self.view, dtype=np.float64))
            keep = np.sort(np.argsort(-facing, kind="stable")[:self.n_points])
        pts = cloud.points[keep]
        if self.noise_sigma > 0:
            rng = np.random.default_rng([self.seed, 1])
            pts = pts + rng.normal(scale=self.noise_sigma, size=pts.shape)
        return PointCloud(pts), labels[keep]


@dataclass(frozen=True)
class FileReconstructor:
    """Loads a precomputed cloud; every point is labelled as target (0)."""

    path: Optional[str] = None

    def reconstruct(self, source=None):
        from .plyio import read_cloud

        cloud = read_cloud(source if source is not None else self.path)
        return cloud, np.zeros(len(cloud), dtype=np.int64)


def _tangent_frames(pts: np.ndarray, k: int):
    k = min(k, len(pts))
    dist, idx = cKDTree(pts).query(pts, k=k)
    dist, idx = dist.reshape(len(pts), k), idx.reshape(len(pts), k)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    _, evecs = np.linalg.eigh(np.einsum("nki,nkj->nij", centered, centered))
    spacing = dist[:, 1:].mean(axis=1) if k > 1 else np.zeros(len(pts))
    return evecs[:, :, 2], evecs[:, :, 1], spacing


def _split_round(pts: np.ndarray, labels: np.ndarray, target: int, rng: np.random.Generator, k: int):
    n = len(pts)
    extra = target - n
    if extra <= 0:
        return pts, labels
    t1, t2, spacing = _tangent_frames(pts, k)
    parent = np.arange(extra) % n
    radius = 0.5 * spacing[parent] * np.sqrt(rng.uniform(0.0, 1.0, size=extra))
    theta = rng.uniform(0.0, 2 * math.pi, size=extra)
    offset = (np.cos(theta) * radius)[:, None] * t1[parent] + (np.sin(theta) * radius)[:, None] * t2[parent]
    return np.concatenate([pts, pts[parent] + offset]), np.concatenate([labels, labels[parent]])


def densify(cloud: PointCloud, target: int, seed: int = 0, k: int = 8, labels=None, return_labels: bool = False):
    """Two-round tangent-plane point splitting up to exactly ``target`` points.

    Round sizes follow N -> round(sqrt(N * target)) -> target. Each new point
    is a child of an existing one, displaced inside the parent's local PCA
    tangent plane by at most half the mean neighbour spacing. Parents are
    kept unchanged at the front of the output.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot densify an empty cloud")
    if target < n:
        raise ValueError(f"densify target {target} is below the cloud size {n}; use resample_cloud to reduce")
    lab = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if target == n:
        return (cloud, lab) if return_labels else cloud
    rng = np.random.default_rng(seed)
    mid = min(max(int(round(math.sqrt(n * target))), n), target)
    pts, lab = _split_round(cloud.points, lab, mid, rng, k)
    pts, lab = _split_round(pts, lab, target, rng, k)
    out = PointCloud(pts)
    return (out, lab) if return_labels else out


def estimate_normals_by_segment(cloud: PointCloud, labels, k: int = 16) -> PointCloud:
    """PCA normals estimated and oriented independently within each segment."""
    labels = np.asarray(labels)
    normals = np.zeros_like(cloud.points)
    for lab in np.unique(labels):
        idx = np.nonzero(labels == lab)[0]
        sub = cloud.take(idx)
        if len(idx) >= 3:
            normals[idx] = estimate_normals(sub, k=min(k, len(idx))).normals
        else:
            normals[idx] = normalize(sub.points - cloud.centroid + np.array([0.0, 0.0, 1e-12]))
    return cloud.with_normals(normals)


@dataclass
class PipelineConfig:
    coarse_points: int = 2048
    dense_points: int = 16384
    triplane_channels: int = 32
    triplane_height: int = 64
    triplane_width: int = 64
    decoder_hidden: tuple = (64, 64)
    sh_degree: int = 1
    normal_k: int = 16
    densify_k: int = 8
    loss: LossConfig = field(default_factory=LossConfig)
    gripper: GripperModel = field(default_factory=GripperModel)
    mu: float = 1.0
    top_k: int = 10
    max_grasps: int = 128
    max_anchors: int = 2048
    seed: int = 0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    metric_points: int = 16384
    emd_points: int = 512
    gt_seed: int = 12345
    compute_metrics: bool = True

    def __post_init__(self):
        if self.coarse_points > self.dense_points:
            raise ValueError("coarse_points must not exceed dense_points")
        if min(self.coarse_points, self.metric_points, self.emd_points, self.top_k) < 1:
            raise ValueError("point counts and top_k must be positive")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["gripper"] = self.gripper.to_dict()
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "loss" in d:
            loss = dict(d["loss"])
            loss.pop("lpips_hook", None)
            d["loss"] = LossConfig(**loss)
        if "gripper" in d:
            d["gripper"] = GripperModel.from_dict(d["gripper"])
        return cls(**d)


@dataclass
class Reconstruction:
    coarse: PointCloud
    dense: PointCloud  # with estimated normals
    labels: np.ndarray
    triplane: Triplane
    decoder: DecoderWeights
    gaussians: GaussianSet
    timings: dict

    def save(self, out_dir) -> dict:
        """Write all artifacts into ``out_dir``; returns name -> path."""
        from .gaussians import save_decoder, save_gaussians_ply
        from .plyio import write_cloud
        from .triplane import save_triplane

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "coarse": out / "coarse.ply", "dense": out / "dense.ply", "labels": out / "labels.json",
            "triplane": out / "triplane.json", "triplane_payload": out / "triplane.bin",
            "decoder": out / "decoder.json", "gaussians": out / "gaussians.ply",
        }
        write_cloud(paths["coarse"], self.coarse)
        write_cloud(paths["dense"], self.dense)
        paths["labels"].write_text(json.dumps({"labels": self.labels.tolist()}) + "\n")
        save_triplane(self.triplane, paths["triplane"], paths["triplane_payload"])
        save_decoder(self.decoder, paths["decoder"])
        paths["decoder_payload"] = out / "decoder.bin"
        save_gaussians_ply(self.gaussians, paths["gaussians"])
        return {k: str(v) for k, v in paths.items()}


def _splat_scale(dense: PointCloud) -> float:
    d, _ = cKDTree(dense.points).query(dense.points, k=2)
    return float(max(np.median(d[:, 1]), 1e-6))


def reconstruct(source, reconstructor: Optional[Reconstructor] = None,
                config: Optional[PipelineConfig] = None) -> Reconstruction:
    """coarse cloud -> densify -> triplane -> per-point Gaussian decode."""
    config = config or PipelineConfig()
    if reconstructor is None:
        reconstructor = OracleReconstructor(config.coarse_points, config.noise_sigma, config.dropout, config.seed)
    timings = {}
    t0 = time.perf_counter()
    coarse, labels = reconstructor.reconstruct(source)
    t1 = time.perf_counter()
    timings["reconstruct"] = t1 - t0
    dense, dense_labels = densify(coarse, config.dense_points, seed=config.seed, k=config.densify_k,
                                  labels=labels, return_labels=True)
    dense = estimate_normals_by_segment(dense, dense_labels, k=config.normal_k)
    t2 = time.perf_counter()
    timings["densify"] = t2 - t1
    tri = synthesize_triplane(dense, config.triplane_channels, config.triplane_height, config.triplane_width)
    t3 = time.perf_counter()
    timings["triplane"] = t3 - t2
    feats = query_batch(tri, dense.points)
    decoder = DecoderWeights.splat_prior(tri.feature_dim, config.decoder_hidden, config.sh_degree,
                                         seed=config.seed, splat_scale=_splat_scale(dense))
    gaussians = decode_gaussians(decoder, dense.points, feats)
    t4 = time.perf_counter()
    timings["decode"] = t4 - t3
    return Reconstruction(coarse, dense, dense_labels, tri, decoder, gaussians, timings)


def _metric_cloud(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    norm, _, _ = normalize_cloud(PointCloud(cloud.points))
    return resample_cloud(norm, n, seed=seed)


def cloud_metrics(pred, gt, config: Optional[PipelineConfig] = None) -> dict:
    """CD and F-score on normalized clouds resampled to ``metric_points``;
    EMD on an FPS subset of ``emd_points`` from each."""
    config = config or PipelineConfig()
    a = _metric_cloud(pred, config.metric_points, config.seed)
    b = _metric_cloud(gt, config.metric_points, config.seed)
    ea = resample_cloud(a, config.emd_points, seed=config.seed)
    eb = resample_cloud(b, config.emd_points, seed=config.seed)
    emd = earth_mover_distance(ea, eb, return_result=True)
    cd, fs = chamfer_and_fscore(a, b, config.loss.fscore_threshold)
    return {"cd": cd, "emd": emd.value, "emd_gap": emd.gap, "fscore": fs}


def grasp_is_valid(g: Grasp, scene: SceneDescriptor, gt_cloud: PointCloud, gripper: GripperModel, mu: float,
                   tree: Optional[cKDTree] = None) -> bool:
    """Collision-free against ground-truth samples and force-closing on the
    true surface where the jaw line meets it."""
    if not check_collision(g, gripper, gt_cloud.points, tree=tree):
        return False
    hit = line_contacts(scene, g.contact, g.baseline, g.width)
    if hit is None:
        return False
    c1, c2 = hit
    if np.linalg.norm(c2 - c1) < 1e-9:
        return False
    n1, n2 = scene.surface_normal(np.stack([c1, c2]))
    return friction_cone_score(c1, c2, -n1, -n2, mu) > 0


@dataclass
class ObjectResult:
    name: str
    metrics: dict
    n_grasps: int
    n_valid: int
    validity: float
    flags: list
    timings: dict
    error: Optional[str] = None

    def to_dict(self, with_timings: bool = False) -> dict:
        d = asdict(self)
        if not with_timings:
            d.pop("timings")
        return d


def evaluate_one(scene: SceneDescriptor, config: PipelineConfig) -> ObjectResult:
    t_start = time.perf_counter()
    try:
        rec = reconstruct(scene, None, config)
        timings = dict(rec.timings)
        t0 = time.perf_counter()
        gt_cloud, _ = scene.sample(config.metric_points, seed=config.gt_seed)
        metrics = cloud_metrics(rec.dense, gt_cloud, config) if config.compute_metrics else {}
        t1 = time.perf_counter()
        timings["metrics"] = t1 - t0
        mask = SegmentMask(rec.labels == scene.target)
        plan = plan_grasps(rec.dense, mask, config.gripper, config.mu, config.top_k, config.seed,
                           config.max_grasps, max_candidates=config.max_anchors)
        t2 = time.perf_counter()
        timings["grasp"] = t2 - t1
        tree = cKDTree(gt_cloud.points)
        n_valid = sum(grasp_is_valid(g, scene, gt_cloud, config.gripper, config.mu, tree) for g in plan)
        timings["validate"] = time.perf_counter() - t2
        flags = [] if plan else ["no feasible grasp"]
        validity = n_valid / len(plan) if plan else 0.0
        timings["total"] = time.perf_counter() - t_start
        return ObjectResult(scene.name, metrics, len(plan), int(n_valid), validity, flags, timings)
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        return ObjectResult(scene.name, {}, 0, 0, 0.0, ["error"], {"total": time.perf_counter() - t_start},
                            f"{type(exc).__name__}: {exc}")


AGG_KEYS = ("cd", "emd", "fscore", "validity")


@dataclass
class EvaluationResult:
    objects: list
    config: dict

    def aggregate(self) -> dict:
        ok = [o for o in self.objects if o.error is None]
        out = {}
        for key in AGG_KEYS:
            vals = [o.validity if key == "validity" else o.metrics[key] for o in ok if key == "validity" or key in o.metrics]
            out[key] = {"mean": float(np.mean(vals)) if vals else None,
                        "std": float(np.std(vals)) if vals else None}
        out["n_objects"] = len(self.objects)
        out["n_failed"] = len(self.objects) - len(ok)
        return out

    def to_dict(self) -> dict:
        return {"objects": [o.to_dict() for o in self.objects], "aggregate": self.aggregate(),
                "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def timings(self) -> dict:
        return {o.name: o.timings for o in self.objects}

    def table(self) -> str:
        header = ("object", "CD(x1e3)", "EMD", "FS", "grasps", "valid", "rate", "flags")
        rows = []
        for o in self.objects:
            m = o.metrics
            rows.append((o.name,
                         f"{m['cd'] * 1e3:.4f}" if m else "-", f"{m['emd']:.4f}" if m else "-",
                         f"{m['fscore']:.4f}" if m else "-", str(o.n_grasps), str(o.n_valid),
                         f"{o.validity:.3f}", ",".join(o.flags + ([o.error] if o.error else [])) or "-"))
        agg = self.aggregate()

        def ms(key, scale=1.0, digits=4):
            a = agg[key]
            return "-" if a["mean"] is None else f"{a['mean'] * scale:.{digits}f}±{a['std'] * scale:.{digits}f}"

        rows.append(("mean±std", ms("cd", 1e3), ms("emd"), ms("fscore"), "", "", ms("validity", digits=3), ""))
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        return "\n".join(lines) + "\n"


def evaluate(descriptors: Sequence[SceneDescriptor], config: Optional[PipelineConfig] = None,
             threads: int = 1) -> EvaluationResult:
    """Run every scene through the pipeline; results keep input order."""
    if not descriptors:
        raise ValueError("evaluate needs at least one scene")
    config = config or PipelineConfig()
    if threads < 1:
        raise ValueError("threads must be at least 1")
    if threads == 1:
        results = [evaluate_one(s, config) for s in descriptors]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: evaluate_one(s, config), descriptors))
    return EvaluationResult(results, config.to_dict())


def noise_sweep(descriptors: Sequence[SceneDescriptor], sigmas=(0.0, 0.005, 0.01, 0.02), seeds=range(5),
                config: Optional[PipelineConfig] = None, threads: int = 1) -> dict:
    """Mean grasp-validity rate per noise level, averaged over scenes and seeds."""
    config = config or PipelineConfig()
    out = {}
    for sigma in sigmas:
        rates = []
        for seed in seeds:
            res = evaluate(descriptors, replace(config, noise_sigma=float(sigma), seed=int(seed)), threads)
            rates += [o.validity for o in res.objects]
        out[float(sigma)] = float(np.mean(rates))
    return out
