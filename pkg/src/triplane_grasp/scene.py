"""Synthetic tabletop scenes built from analytic primitives.

Each primitive provides an inside/outside function (negative inside), an
outward normal field and an area-weighted surface sampler, which serve as
ground truth for reconstruction metrics and grasp validation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import PointCloud, Rotation, normalize

PRIMITIVE_TYPES = ("sphere", "box", "cylinder", "superellipsoid")


def _spow(x, p):
    return np.sign(x) * np.abs(x) ** p


@dataclass(frozen=True)
class Primitive:
    """One solid. ``dims`` depends on ``kind``:

    * sphere: ``radius``
    * box: ``size`` (3 edge lengths)
    * cylinder: ``radius``, ``height`` (axis along local z)
    * superellipsoid: ``radii`` (3), ``exponents`` (e1 for latitude, e2 for longitude)
    """

    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PRIMITIVE_TYPES:
            raise ValueError(f"unknown primitive {self.kind!r}; expected one of {PRIMITIVE_TYPES}")
        for key, val in self.dims.items():
            if np.any(np.asarray(val, dtype=np.float64) <= 0):
                raise ValueError(f"{self.kind} dimension {key!r} must be positive")
        required = {"sphere": ("radius",), "box": ("size",), "cylinder": ("radius", "height"),
                    "superellipsoid": ("radii", "exponents")}[self.kind]
        missing = [k for k in required if k not in self.dims]
        if missing:
            raise ValueError(f"{self.kind} needs dims {missing}")

    @property
    def _rot(self) -> np.ndarray:
        return Rotation(self.rotation).as_matrix()

    def to_local(self, x):
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.center)) @ self._rot

    def to_world(self, x):
        return np.asarray(x) @ self._rot.T + np.asarray(self.center)

    def implicit(self, x) -> np.ndarray:
        """Negative inside, zero on the surface, roughly metric near it."""
        p = self.to_local(x).reshape(-1, 3)
        d = self.dims
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=1) - d["radius"]
        if self.kind == "box":
            return np.max(np.abs(p) - 0.5 * np.asarray(d["size"]), axis=1)
        if self.kind == "cylinder":
            return np.maximum(np.linalg.norm(p[:, :2], axis=1) - d["radius"], np.abs(p[:, 2]) - 0.5 * d["height"])
        a = np.asarray(d["radii"], dtype=np.float64)
        e1, e2 = d["exponents"]
        q = np.abs(p) / a
        g = (q[:, 0] ** (2 / e2) + q[:, 1] ** (2 / e2)) ** (e2 / e1) + q[:, 2] ** (2 / e1)
        return (g ** (e1 / 2) - 1.0) * a.min()

    def area(self) -> float:
        d = self.dims
        if self.kind == "sphere":
            return 4 * math.pi * d["radius"] ** 2
        if self.kind == "box":
            sx, sy, sz = d["size"]
            return 2 * (sx * sy + sy * sz + sx * sz)
        if self.kind == "cylinder":
            r, h = d["radius"], d["height"]
            return 2 * math.pi * r * h + 2 * math.pi * r * r
        eta, omega = self._param_grid(128, 256)
        pts, _ = self._param_points(eta, omega)
        return float(self._param_area(eta, omega).sum() * (math.pi / 128) * (2 * math.pi / 256))

    def _param_grid(self, n_eta, n_omega):
        eta = -math.pi / 2 + (np.arange(n_eta) + 0.5) * math.pi / n_eta
        omega = -math.pi + (np.arange(n_omega) + 0.5) * 2 * math.pi / n_omega
        e, o = np.meshgrid(eta, omega, indexing="ij")
        return e.ravel(), o.ravel()

    def _param_points(self, eta, omega):
        a, b, c = self.dims["radii"]
        e1, e2 = self.dims["exponents"]
        ce, se = np.cos(eta), np.sin(eta)
        co, so = np.cos(omega), np.sin(omega)
        pts = np.stack([a * _spow(ce, e1) * _spow(co, e2), b * _spow(ce, e1) * _spow(so, e2), c * _spow(se, e1)], 1)
        nrm = np.stack([_spow(ce, 2 - e1) * _spow(co, 2 - e2) / a, _spow(ce, 2 - e1) * _spow(so, 2 - e2) / b,
                        _spow(se, 2 - e1) / c], 1)
        return pts, normalize(nrm)

    def _param_area(self, eta, omega, h=1e-6):
        p0, _ = self._param_points(eta, omega)
        pe, _ = self._param_points(eta + h, omega)
        po, _ = self._param_points(eta, omega + h)
        return np.linalg.norm(np.cross((pe - p0) / h, (po - p0) / h), axis=1)

    def sample_surface(self, n: int, rng: np.random.Generator):
        """``n`` approximately area-uniform surface points and outward normals."""
        d = self.dims
        if n <= 0:
            return np.zeros((0, 3)), np.zeros((0, 3))
        if self.kind == "sphere":
            nrm = normalize(rng.normal(size=(n, 3)))
            pts = nrm * d["radius"]
        elif self.kind == "box":
            size = np.asarray(d["size"], dtype=np.float64)
            areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
            face = rng.choice(6, size=n, p=np.repeat(areas, 2) / (2 * areas.sum()))
            axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
            pts = (rng.uniform(-0.5, 0.5, size=(n, 3))) * size
            pts[np.arange(n), axis] = sign * 0.5 * size[axis]
            nrm = np.zeros((n, 3))
            nrm[np.arange(n), axis] = sign
        elif self.kind == "cylinder":
            r, h = d["radius"], d["height"]
            side, cap = 2 * math.pi * r * h, math.pi * r * r
            part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
            theta = rng.uniform(0, 2 * math.pi, size=n)
            rho = r * np.sqrt(rng.uniform(0, 1, size=n))
            z = rng.uniform(-h / 2, h / 2, size=n)
            pts = np.where((part == 0)[:, None],
                           np.stack([r * np.cos(theta), r * np.sin(theta), z], 1),
                           np.stack([rho * np.cos(theta), rho * np.sin(theta), np.where(part == 1, h / 2, -h / 2)], 1))
            nrm = np.where((part == 0)[:, None],
                           np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], 1),
                           np.stack([np.zeros(n), np.zeros(n), np.where(part == 1, 1.0, -1.0)], 1))
        else:
            m = 40 * n
            eta = rng.uniform(-math.pi / 2, math.pi / 2, size=m)
            omega = rng.uniform(-math.pi, math.pi, size=m)
            w = self._param_area(eta, omega)
            w = np.minimum(np.nan_to_num(w, nan=0.0), np.quantile(w, 0.999))
            pick = rng.choice(m, size=n, replace=False, p=w / w.sum())
            pts, nrm = self._param_points(eta[pick], omega[pick])
        rot = self._rot
        return pts @ rot.T + np.asarray(self.center), nrm @ rot.T

    def to_dict(self) -> dict:
        return {"type": self.kind, "center": list(self.center), "rotation": list(self.rotation),
                **{k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v) for k, v in self.dims.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        d = dict(d)
        kind = d.pop("type")
        center = tuple(float(v) for v in d.pop("center", (0.0, 0.0, 0.0)))
        rotation = tuple(float(v) for v in d.pop("rotation", (1.0, 0.0, 0.0, 0.0)))
        dims = {k: (tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else float(v)) for k, v in d.items()}
        return cls(kind, center, rotation, dims)


@dataclass(frozen=True)
class SceneDescriptor:
    primitives: tuple
    table_height: float = 0.0
    target: int = 0
    name: str = "scene"
    convex: Optional[bool] = None

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        if not 0 <= self.target < len(self.primitives):
            raise ValueError("target index out of range")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def implicit(self, x) -> np.ndarray:
        return np.min([p.implicit(x) for p in self.primitives], axis=0)

    def surface_normal(self, x, h: float = 1e-6) -> np.ndarray:
        """Outward normal of the union surface by central differences."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        grad = np.zeros_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            grad[:, k] = (self.implicit(x + e) - self.implicit(x - e)) / (2 * h)
        return normalize(grad)

    def sample(self, n: int, seed: int = 0):
        """Area-proportional samples over all primitives -> (PointCloud with normals, labels).

        ``labels[i]`` is the index of the primitive point i lies on.
        """
        rng = np.random.default_rng(seed)
        areas = np.array([p.area() for p in self.primitives])
        exact = n * areas / areas.sum()
        counts = np.floor(exact).astype(int)
        rest = n - counts.sum()
        if rest:
            counts[np.argsort(-(exact - counts), kind="stable")[:rest]] += 1
        pts, nrm, lab = [], [], []
        for k, (prim, cnt) in enumerate(zip(self.primitives, counts)):
            p, q = prim.sample_surface(int(cnt), rng)
            pts.append(p)
            nrm.append(q)
            lab.append(np.full(int(cnt), k))
        return PointCloud(np.concatenate(pts), normalize(np.concatenate(nrm))), np.concatenate(lab)

    def to_dict(self) -> dict:
        d = {"name": self.name, "table_height": self.table_height, "target": self.target,
             "primitives": [p.to_dict() for p in self.primitives]}
        if self.convex is not None:
            d["convex"] = self.convex
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDescriptor":
        return cls(tuple(Primitive.from_dict(p) for p in d["primitives"]), float(d.get("table_height", 0.0)),
                   int(d.get("target", 0)), str(d.get("name", "scene")), d.get("convex"))

    @classmethod
    def load(cls, path) -> "SceneDescriptor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_scene_list(path) -> list[SceneDescriptor]:
    """A JSON list whose entries are inline descriptors or paths relative to the list."""
    path = Path(path)
    doc = json.loads(path.read_text())
    items = doc["scenes"] if isinstance(doc, dict) else doc
    out = []
    for item in items:
        if isinstance(item, str):
            out.append(SceneDescriptor.load(path.parent / item))
        else:
            out.append(SceneDescriptor.from_dict(item))
    if not out:
        raise ValueError("scene list is empty")
    return out


def builtin_fixtures() -> list[SceneDescriptor]:
    """The six shipped desk-scale fixtures."""
    return load_scene_list(Path(__file__).parent / "data" / "fixtures.json")


def line_contacts(scene: SceneDescriptor, start, direction, length: float, step: float = 1e-4):
    """Where two jaws closing along a segment first meet the solid.

    The segment runs from ``start`` along unit ``direction`` for ``length``.
    Returns (left_contact, right_contact) refined by bisection, or None when
    the segment misses the solid or starts/ends inside it.
    """
    start = np.asarray(start, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    n = max(int(math.ceil(length / step)), 2)
    ts = np.linspace(0.0, length, n + 1)
    vals = scene.implicit(start + ts[:, None] * direction)
    inside = vals < 0
    if not inside.any() or inside[0] or inside[-1]:
        return None
    first = int(np.argmax(inside))
    last = len(inside) - 1 - int(np.argmax(inside[::-1]))

    def refine(t_out, t_in):
        for _ in range(50):
            mid = 0.5 * (t_out + t_in)
            if scene.implicit(start + mid * direction)[0] < 0:
                t_in = mid
            else:
                t_out = mid
        return 0.5 * (t_out + t_in)

    t_left = refine(ts[first - 1], ts[first])
    t_right = refine(ts[last + 1], ts[last])
    return start + t_left * direction, start + t_right * direction
