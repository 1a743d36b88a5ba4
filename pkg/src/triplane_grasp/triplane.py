"""Triplane feature field: three axis-aligned feature planes queried per point.

Plane order is fixed as XY, XZ, YZ. On each plane the first listed axis runs
along the width (columns) and the second along the height (rows). Grid nodes
follow the cell-center convention: column ``i`` sits at plane coordinate
``2 * (i + 0.5) / W - 1``. Coordinates outside [-1, 1] are clamped, and the
half-cell border between the outermost node and the plane edge replicates the
border node value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import PointCloud, as_points

PLANE_ORDER = ("xy", "xz", "yz")
# world axis index feeding (column, row) of each plane
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class Triplane:
    """Feature planes of shape (3, C, H, W) covering an axis-aligned box."""

    planes: np.ndarray
    extent_min: np.ndarray
    extent_max: np.ndarray

    def __post_init__(self):
        planes = np.array(self.planes, dtype=np.float64)
        if planes.ndim != 4 or planes.shape[0] != 3:
            raise ValueError(f"planes must have shape (3, C, H, W), got {planes.shape}")
        if not np.all(np.isfinite(planes)):
            raise ValueError("triplane values must be finite")
        lo = np.array(self.extent_min, dtype=np.float64).reshape(3)
        hi = np.array(self.extent_max, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValueError("triplane extent must have positive volume")
        for a in (planes, lo, hi):
            a.setflags(write=False)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "extent_min", lo)
        object.__setattr__(self, "extent_max", hi)

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def height(self) -> int:
        return self.planes.shape[2]

    @property
    def width(self) -> int:
        return self.planes.shape[3]

    @property
    def feature_dim(self) -> int:
        return 3 * self.channels

    def to_unit(self, xs) -> np.ndarray:
        """Map world coordinates to [-1, 1] per axis (unclamped)."""
        return 2.0 * (xs - self.extent_min) / (self.extent_max - self.extent_min) - 1.0

    def query(self, x) -> np.ndarray:
        """Feature vector of length 3C for a single point."""
        return query_batch(self, np.asarray(x, dtype=np.float64).reshape(1, 3))[0]

    def query_batch(self, xs) -> np.ndarray:
        return query_batch(self, xs)


def _axis_index(u: np.ndarray, size: int):
    """Continuous node index for plane coordinates u, split into (i0, i1, t)."""
    u = np.clip(u, -1.0, 1.0)
    idx = np.clip((u + 1.0) * (0.5 * size) - 0.5, 0.0, size - 1.0)
    if size == 1:
        zero = np.zeros(idx.shape, dtype=np.int64)
        return zero, zero, np.zeros_like(idx)
    i0 = np.minimum(np.floor(idx).astype(np.int64), size - 2)
    return i0, i0 + 1, idx - i0


def query(tri: Triplane, x) -> np.ndarray:
    return tri.query(x)


def query_batch(tri: Triplane, xs) -> np.ndarray:
    """Bilinear lookup on each plane, concatenated as XY | XZ | YZ -> (M, 3C).

    Each output row depends only on its own input point, so results are
    bit-identical regardless of batch composition.
    """
    if isinstance(xs, PointCloud):
        xs = xs.points
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    if len(xs) == 0:
        return np.zeros((0, tri.feature_dim))
    uv = tri.to_unit(xs)
    H, W = tri.height, tri.width
    out = []
    for p, (ax_col, ax_row) in enumerate(PLANE_AXES):
        grid = tri.planes[p]  # (C, H, W)
        c0, c1, tc = _axis_index(uv[:, ax_col], W)
        r0, r1, tr = _axis_index(uv[:, ax_row], H)
        f00 = grid[:, r0, c0]
        f01 = grid[:, r0, c1]
        f10 = grid[:, r1, c0]
        f11 = grid[:, r1, c1]
        val = ((1 - tr) * ((1 - tc) * f00 + tc * f01) + tr * ((1 - tc) * f10 + tc * f11))
        out.append(val.T)
    return np.concatenate(out, axis=1)


def node_coordinates(size: int) -> np.ndarray:
    """Plane coordinates in [-1, 1] of the grid nodes along one axis."""
    return 2.0 * (np.arange(size) + 0.5) / size - 1.0


def padded_extent(points, padding: float = 0.1):
    """Bounding box grown by ``padding`` times its size on every side."""
    pts = as_points(points)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    size = hi - lo
    size = np.where(size > 0, size, max(size.max(), 1e-6))
    return lo - padding * size, hi + padding * size


def synthesize_triplane(cloud: PointCloud, channels: int = 32, height: int = 64, width: int = 64,
                        padding: float = 0.1) -> Triplane:
    """Build deterministic triplane features from a point cloud.

    Stands in for a learned triplane decoder. Per plane, points are splatted
    bilinearly onto the grid to form:

    * channel 0: point density (normalized to peak 1),
    * channels 1-3: density-weighted mean normal (zeros when no normals),
    * channel 4: mean coordinate along the axis orthogonal to the plane,
    * remaining channels: density blurred at increasing scales.
    """
    if channels < 1:
        raise ValueError("channels must be positive")
    pts = cloud.points
    lo, hi = padded_extent(pts, padding)
    tri_extent = (lo, hi)
    uv = 2.0 * (pts - lo) / (hi - lo) - 1.0
    normals = cloud.normals if cloud.normals is not None else np.zeros_like(pts)
    planes = np.zeros((3, channels, height, width))
    for p, (ax_col, ax_row) in enumerate(PLANE_AXES):
        ortho = 3 - ax_col - ax_row
        c0, c1, tc = _axis_index(uv[:, ax_col], width)
        r0, r1, tr = _axis_index(uv[:, ax_row], height)
        values = np.concatenate([np.ones((len(pts), 1)), normals, uv[:, ortho:ortho + 1]], axis=1)
        acc = np.zeros((values.shape[1], height, width))
        for rr, cc, wgt in ((r0, c0, (1 - tr) * (1 - tc)), (r0, c1, (1 - tr) * tc),
                            (r1, c0, tr * (1 - tc)), (r1, c1, tr * tc)):
            flat = rr * width + cc
            for ch in range(values.shape[1]):
                acc[ch].flat[:] += np.bincount(flat, weights=wgt * values[:, ch], minlength=height * width)
        density = acc[0]
        safe = np.where(density > 1e-12, density, 1.0)
        feats = [density / max(density.max(), 1e-12)]
        feats += [acc[ch] / safe for ch in range(1, 5)]
        level = 1
        while len(feats) < channels:
            blurred = gaussian_filter(density, sigma=float(level), mode="nearest")
            feats.append(blurred / max(blurred.max(), 1e-12))
            level += 1
        planes[p] = np.stack(feats[:channels])
    return Triplane(planes, *tri_extent)


def save_triplane(tri: Triplane, header_path, payload_path: Optional[str] = None) -> None:
    """JSON header plus raw little-endian float32 payload (plane, channel, row, col)."""
    header_path = Path(header_path)
    payload_path = Path(payload_path) if payload_path else header_path.with_suffix(".bin")
    header = {
        "format": "triplane",
        "version": 1,
        "C": tri.channels,
        "H": tri.height,
        "W": tri.width,
        "extent_min": tri.extent_min.tolist(),
        "extent_max": tri.extent_max.tolist(),
        "plane_order": list(PLANE_ORDER),
        "value_encoding": "float32-le",
        "layout": "plane-major, channel-major, row-major",
        "payload": payload_path.name,
    }
    payload_path.write_bytes(tri.planes.astype("<f4").tobytes())
    header_path.write_text(json.dumps(header, indent=2) + "\n")


def load_triplane(header_path) -> Triplane:
    header_path = Path(header_path)
    if header_path.suffix == ".bin":
        header_path = header_path.with_suffix(".json")
    header = json.loads(header_path.read_text())
    if header.get("value_encoding", "float32-le") != "float32-le":
        raise ValueError(f"unsupported encoding {header['value_encoding']!r}")
    if tuple(header.get("plane_order", PLANE_ORDER)) != PLANE_ORDER:
        raise ValueError("unsupported plane order")
    c, h, w = int(header["C"]), int(header["H"]), int(header["W"])
    payload = header_path.parent / header.get("payload", header_path.with_suffix(".bin").name)
    raw = np.frombuffer(payload.read_bytes(), dtype="<f4")
    if raw.size != 3 * c * h * w:
        raise ValueError(f"payload holds {raw.size} values, expected {3 * c * h * w}")
    return Triplane(raw.reshape(3, c, h, w).astype(np.float64), header["extent_min"], header["extent_max"])
