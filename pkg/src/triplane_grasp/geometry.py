"""Basic 3D types: rotations, rigid transforms, point clouds and cameras.

All metric paths use float64. Containers are immutable after construction:
their arrays are copied and flagged read-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

UNIT_TOL = 1e-9


class DegenerateCloudError(ValueError):
    """Raised when a cloud has no spatial extent."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def normalize(v, axis=-1, eps=1e-300):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps)


def angle_between(u, v) -> np.ndarray:
    """Angle in radians between (batched) vectors, stable near 0 and pi."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.sum(u * v, axis=-1)
    return np.arctan2(cross, dot)


class Rotation:
    """Unit quaternion rotation, stored as (w, x, y, z)."""

    __slots__ = ("_q",)

    def __init__(self, quat=(1.0, 0.0, 0.0, 0.0), normalize_input: bool = True):
        q = np.asarray(quat, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion must be finite")
        n = np.linalg.norm(q)
        if normalize_input:
            if n < 1e-12:
                raise ValueError("zero quaternion")
            q = q / n
        elif abs(n - 1.0) > UNIT_TOL:
            raise ValueError(f"quaternion norm {n} is not 1")
        # canonical hemisphere keeps equality checks meaningful
        if q[0] < 0:
            q = -q
        self._q = _frozen(q)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = normalize(axis)
        h = 0.5 * angle
        return cls(np.concatenate([[np.cos(h)], np.sin(h) * axis]))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        m = np.asarray(m, dtype=np.float64)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        # Shepperd's method: pivot on the largest diagonal term
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
        return cls(q)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        return cls(rng.normal(size=4))

    @property
    def quat(self) -> np.ndarray:
        return self._q

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self._q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.as_matrix().T

    def inverse(self) -> "Rotation":
        w, x, y, z = self._q
        return Rotation((w, -x, -y, -z))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self._q
        w2, x2, y2, z2 = other._q
        return Rotation(
            (
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            )
        )

    def __repr__(self) -> str:
        return f"Rotation(quat={self._q.tolist()})"


class RigidTransform:
    """x -> R x + t."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Optional[Rotation] = None, translation=(0.0, 0.0, 0.0)):
        self.rotation = rotation if rotation is not None else Rotation.identity()
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        self.translation = _frozen(t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("bottom row of a rigid transform must be [0, 0, 0, 1]")
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0) -> "RigidTransform":
        return cls(Rotation.random(rng), rng.normal(scale=scale, size=3))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return self.rotation.apply(vectors)

    def inverse(self) -> "RigidTransform":
        inv = self.rotation.inverse()
        return RigidTransform(inv, -inv.apply(self.translation))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation, self.apply(other.translation))

    def __repr__(self) -> str:
        return f"RigidTransform(quat={self.rotation.quat.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True)
class PointCloud:
    """N points with optional unit normals and RGB colors in [0, 1]."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > UNIT_TOL):
                raise ValueError("normals must be unit vectors")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64)
            if col.shape != pts.shape:
                raise ValueError("colors must match points in shape")
            if np.any(col < 0) or np.any(col > 1):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", _frozen(col))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def take(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.colors is None else self.colors[idx],
        )

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.colors)

    def transformed(self, tf: RigidTransform) -> "PointCloud":
        normals = None if self.normals is None else normalize(tf.apply_vectors(self.normals))
        return PointCloud(tf.apply(self.points), normals, self.colors)


def as_points(cloud) -> np.ndarray:
    """Accept a PointCloud or an (N, 3) array-like."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; `extrinsic` maps world to camera coordinates.

    Camera space follows the OpenCV convention (x right, y down, z forward)
    and pixel (u, v) has its center at the integer coordinate (u, v).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return self.extrinsic.inverse().translation

    def scaled(self, factor: float) -> "CameraModel":
        return CameraModel(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)), self.extrinsic,
        )

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fx: float, fy: Optional[float] = None,
                width: int, height: int, cx: Optional[float] = None, cy: Optional[float] = None):
        eye = np.asarray(eye, dtype=np.float64)
        forward = normalize(np.asarray(target, dtype=np.float64) - eye)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [1.0, 0.0, 0.0])
        right = normalize(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])  # rows: camera axes in world frame
        ext = RigidTransform(Rotation.from_matrix(rot), -rot @ eye)
        return cls(
            fx, fy if fy is not None else fx,
            (width - 1) / 2 if cx is None else cx,
            (height - 1) / 2 if cy is None else cy,
            width, height, ext,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsic": self.extrinsic.as_matrix().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        ext = d.get("extrinsic")
        tf = RigidTransform.identity() if ext is None else RigidTransform.from_matrix(np.asarray(ext, dtype=np.float64).reshape(4, 4))
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), tf)


def estimate_normals(cloud: PointCloud, k: int = 16, return_degenerate: bool = False):
    """PCA normals from the k nearest neighbours (self included).

    Normals are flipped to point away from the cloud centroid. Neighbourhoods
    whose two smallest covariance eigenvalues vanish (collinear or coincident
    points) get the centroid-outward direction instead; their count is
    returned when ``return_degenerate`` is set.
    """
    pts = cloud.points
    n = len(pts)
    if k < 3:
        raise ValueError("k must be at least 3")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    _, idx = cKDTree(pts).query(pts, k=k)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    centroid = pts.mean(axis=0)
    outward = pts - centroid
    scale = max(evals[:, 2].max(), np.finfo(float).tiny)
    degenerate = evals[:, 1] <= 1e-12 * scale + 1e-300
    if np.any(degenerate):
        out = outward[degenerate]
        lengths = np.linalg.norm(out, axis=1)
        fallback = np.tile([0.0, 0.0, 1.0], (len(out), 1))
        ok = lengths > 1e-12
        fallback[ok] = out[ok] / lengths[ok, None]
        normals[degenerate] = fallback

    flip = np.sum(normals * outward, axis=1) < 0
    normals[flip & ~degenerate] *= -1
    normals = normalize(normals)
    result = PointCloud(pts, normals, cloud.colors)
    if return_degenerate:
        return result, int(degenerate.sum())
    return result


def normalize_cloud(cloud: PointCloud):
    """Center on the centroid and scale so the farthest point sits at radius 1.

    Returns ``(normalized_cloud, scale, center)``; the original points are
    ``normalized.points / scale + center``.
    """
    pts = cloud.points
    if len(pts) < 2:
        raise DegenerateCloudError("degenerate cloud: need at least two points")
    center = pts.mean(axis=0)
    radius = np.linalg.norm(pts - center, axis=1).max()
    if not radius > 0:
        raise DegenerateCloudError("degenerate cloud: all points coincide")
    scale = 1.0 / radius
    out = PointCloud((pts - center) * scale, cloud.normals, cloud.colors)
    return out, scale, center


def farthest_point_indices(points: np.ndarray, count: int) -> np.ndarray:
    """Greedy FPS seeded at the point nearest the centroid (lowest index on ties)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    count = min(count, n)
    start = int(np.argmin(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1), out=dist)
    return chosen


def resample_cloud(cloud: PointCloud, target: int, seed: int = 0) -> PointCloud:
    """Return exactly ``target`` points.

    Larger clouds are reduced by farthest-point sampling (no randomness);
    smaller ones are replicated cyclically, with the copies jittered by a
    seeded uniform offset of norm at most 1e-4 times the cloud radius (a
    lower bound on its diameter).
    """
    if target < 1:
        raise ValueError("target must be positive")
    n = len(cloud)
    if n == target:
        return cloud
    if n > target:
        return cloud.take(farthest_point_indices(cloud.points, target))

    idx = np.arange(target) % n
    out = cloud.points[idx].copy()
    radius = np.linalg.norm(cloud.points - cloud.centroid, axis=1).max()
    rng = np.random.default_rng(seed)
    half = 1e-4 * radius / np.sqrt(3.0)
    jitter = rng.uniform(-half, half, size=(target - n, 3))
    out[n:] += jitter
    return PointCloud(
        out,
        None if cloud.normals is None else cloud.normals[idx],
        None if cloud.colors is None else cloud.colors[idx],
    )
