"""Contact-anchored parallel-jaw grasps.

A grasp is parameterized by a contact point ``c``, baseline direction ``b``
(from the contact jaw toward the opposite jaw), approach direction ``a``,
opening width ``w`` and baseline-to-base distance ``d``. Its pose is::

    t = c + (w / 2) b + d a        R = [b, a x b, a]

Contacts emitted by the sampler are jaw points: the surface contact pulled
back by ``contact_slack`` along -b, so both jaws start ``contact_slack`` clear
of the surface.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform, Rotation, angle_between

DEFAULT_UP = (0.0, 0.0, 1.0)
# tie-breaker for baselines parallel to up; transform it together with up
DEFAULT_SIDE = (1.0, 0.0, 0.0)
N_APPROACH = 8
# preference order over the 8 approach candidates; symmetric pairs are broken
# by index so no float comparison decides between mirror images
APPROACH_ORDER = (0, 1, 7, 2, 6, 3, 5, 4)
CONTACT_EXCLUSION = 0.002
_UNIT_TOL = 1e-12
# ranking keys are rounded so last-ulp noise cannot reorder ties
RANK_DECIMALS = 9


@dataclass(frozen=True)
class GripperModel:
    """Parallel-jaw gripper as three boxes: two fingers and a palm (meters)."""

    w_max: float = 0.08
    depth: float = 0.10
    finger_length: float = 0.05
    finger_thickness: float = 0.01
    palm_width: float = 0.10
    contact_slack: float = 0.002

    def __post_init__(self):
        for name in ("w_max", "depth", "finger_length", "finger_thickness", "palm_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"gripper {name} must be positive")
        if not 0 <= self.contact_slack < self.w_max / 2:
            raise ValueError("contact_slack must be in [0, w_max / 2)")

    @classmethod
    def from_dict(cls, d: dict) -> "GripperModel":
        aliases = {"d": "depth"}
        kw = {aliases.get(k, k): float(v) for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Grasp:
    contact: np.ndarray
    baseline: np.ndarray
    approach: np.ndarray
    width: float
    depth: float
    score: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.contact, dtype=np.float64).reshape(3)
        a = np.asarray(self.approach, dtype=np.float64).reshape(3)
        b = np.asarray(self.baseline, dtype=np.float64).reshape(3)
        # already-orthonormal input is kept bit-for-bit so JSON round-trips are stable
        na = np.linalg.norm(a)
        if not na > 0:
            raise ValueError("approach must be non-zero")
        if abs(na - 1.0) > _UNIT_TOL:
            a = a / na
        if abs(np.dot(a, b)) > _UNIT_TOL:
            b = b - np.dot(a, b) * a
        nb = np.linalg.norm(b)
        if not nb > 1e-9:
            raise ValueError("baseline must not be parallel to approach")
        if abs(nb - 1.0) > _UNIT_TOL:
            b = b / nb
        if self.width < 0:
            raise ValueError("width must be non-negative")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        for name, v in (("contact", c), ("baseline", b), ("approach", a)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "depth", float(self.depth))
        object.__setattr__(self, "score", float(self.score))

    @property
    def second_contact(self) -> np.ndarray:
        return self.contact + self.width * self.baseline

    def rotation_matrix(self) -> np.ndarray:
        return np.stack([self.baseline, np.cross(self.approach, self.baseline), self.approach], axis=1)

    def to_dict(self) -> dict:
        return {
            "contact": self.contact.tolist(),
            "baseline": self.baseline.tolist(),
            "approach": self.approach.tolist(),
            "width_m": self.width,
            "depth_m": self.depth,
            "score": self.score,
            "pose_4x4_row_major": grasp_pose_matrix(self).ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grasp":
        return cls(d["contact"], d["baseline"], d["approach"], d["width_m"], d["depth_m"], d.get("score", 0.0))


def grasp_pose_matrix(g: Grasp) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = g.rotation_matrix()
    m[:3, 3] = g.contact + 0.5 * g.width * g.baseline + g.depth * g.approach
    return m


def grasp_pose(g: Grasp, gripper: Optional[GripperModel] = None) -> RigidTransform:
    """Rigid transform of the gripper base frame. The grasp's own depth is used."""
    m = grasp_pose_matrix(g)
    return RigidTransform(Rotation.from_matrix(m[:3, :3]), m[:3, 3])


def friction_cone_score(c1, c2, n1, n2, mu: float) -> float:
    """Linear margin inside both friction cones, clamped to [0, 1].

    ``n1`` and ``n2`` are contact force directions (pointing into the
    object). The score is positive iff the contact line lies strictly inside
    both cones of half-angle atan(mu).
    """
    if not mu > 0:
        raise ValueError("friction coefficient must be positive")
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    line = c2 - c1
    if not np.linalg.norm(line) > 0:
        raise ValueError("coincident contacts")
    theta = max(float(angle_between(n1, line)), float(angle_between(n2, -line)))
    return float(min(max(1.0 - theta / math.atan(mu), 0.0), 1.0))


def _perpendicular(b: np.ndarray, up: np.ndarray, side: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to b, pointing as far against ``up`` as possible.

    When b is parallel to up the projection of ``side`` is used instead, and
    failing that the world axis least aligned with b.
    """
    for ref, sign in ((up, -1.0), (side, 1.0)):
        u = sign * (ref - np.dot(ref, b) * b)
        if np.linalg.norm(u) >= 1e-9:
            return u / np.linalg.norm(u)
    ref = np.eye(3)[int(np.argmin(np.abs(b)))]
    u = ref - np.dot(ref, b) * b
    return u / np.linalg.norm(u)


def approach_candidates(b: np.ndarray, up=DEFAULT_UP, side=DEFAULT_SIDE) -> np.ndarray:
    """The 8 approach directions about b, in preference order."""
    b = np.asarray(b, dtype=np.float64)
    u0 = _perpendicular(b, np.asarray(up, dtype=np.float64), np.asarray(side, dtype=np.float64))
    v0 = np.cross(b, u0)
    out = []
    for k in APPROACH_ORDER:
        ang = 2 * math.pi * k / N_APPROACH
        out.append(math.cos(ang) * u0 + math.sin(ang) * v0)
    return np.array(out)


def find_antipodal_partner(points: np.ndarray, normals: np.ndarray, i: int, mu: float,
                           max_span: float, ray_tol: float, tree: Optional[cKDTree] = None):
    """Best opposing contact for point i, or None.

    Candidates lie within ``ray_tol`` of the inward ray from point i, no
    farther than ``max_span`` along it and more than ``ray_tol`` away; both
    cone angles must be at most atan(mu). The best-scoring candidate wins,
    lowest index on ties.
    """
    c = points[i]
    n_in = -normals[i]
    if tree is None:
        cand = np.arange(len(points))
    else:
        mid = c + 0.5 * max_span * n_in
        cand = np.asarray(tree.query_ball_point(mid, 0.5 * max_span + ray_tol, return_sorted=True), dtype=np.int64)
    if len(cand) == 0:
        return None
    rel = points[cand] - c
    along = rel @ n_in
    ok = (along > ray_tol) & (cand != i)
    cand, rel, along = cand[ok], rel[ok], along[ok]
    dist2 = np.einsum("ij,ij->i", rel, rel)
    ok = (dist2 - along * along <= ray_tol * ray_tol) & (dist2 <= max_span * max_span)
    if not np.any(ok):
        return None
    cand = cand[ok]
    line = points[cand] - c
    half = math.atan(mu)
    ang1 = angle_between(n_in[None, :], line)
    ang2 = angle_between(-normals[cand], -line)
    ok = (ang1 <= half) & (ang2 <= half)
    if not np.any(ok):
        return None
    cand = cand[ok]
    scores = np.clip(1.0 - np.maximum(ang1[ok], ang2[ok]) / half, 0.0, 1.0)
    best = int(np.argmax(scores))  # first maximum == lowest index since cand is sorted
    return int(cand[best]), float(scores[best])


def sample_antipodal_grasps(cloud: PointCloud, gripper: GripperModel = GripperModel(), mu: float = 1.0,
                            max_grasps: Optional[int] = 256, seed: int = 0, ray_tol: float = 0.003,
                            up=DEFAULT_UP, side=DEFAULT_SIDE, max_candidates: Optional[int] = None,
                            avoid_collisions: bool = True) -> list[Grasp]:
    """Analytic antipodal sampler over the cloud's own points.

    Contact candidates are visited in a seeded random order. For each, the
    best antipodal partner (see :func:`find_antipodal_partner`) defines the
    baseline; the width adds ``contact_slack`` on both sides and must fit in
    ``w_max``. A pair already emitted from its other end is skipped. The
    emitted contact is the jaw point ``slack`` outside the anchor surface
    point. Among the 8 approach directions about the baseline the most
    preferred (most against ``up``) collision-free one against the cloud
    itself is used; if none is free the most preferred is kept and later
    collision checks decide. ``side`` only matters for baselines parallel
    to ``up``.
    """
    if cloud.normals is None:
        raise ValueError("antipodal sampling needs normals; run estimate_normals first")
    if not mu > 0:
        raise ValueError("friction coefficient must be positive")
    pts, nrm = cloud.points, cloud.normals
    slack = gripper.contact_slack
    max_span = gripper.w_max - 2 * slack
    tree = cKDTree(pts)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pts))
    if max_candidates is not None:
        order = order[:max_candidates]
    grasps: list[Grasp] = []
    seen = set()  # unordered pairs already emitted from the other end
    for i in order:
        found = find_antipodal_partner(pts, nrm, int(i), mu, max_span, ray_tol, tree)
        if found is None:
            continue
        j, score = found
        pair = (min(int(i), j), max(int(i), j))
        if pair in seen:
            continue
        seen.add(pair)
        span = pts[j] - pts[i]
        dist = float(np.linalg.norm(span))
        b = span / dist
        contact = pts[i] - slack * b
        width = dist + 2 * slack
        options = [Grasp(contact, b, a, width, gripper.depth, score) for a in approach_candidates(b, up, side)]
        chosen = options[0]
        if avoid_collisions:
            chosen = next((g for g in options if check_collision(g, gripper, pts)), options[0])
        grasps.append(chosen)
        if max_grasps is not None and len(grasps) >= max_grasps:
            break
    return grasps


def _box_specs(g: Grasp, gripper: GripperModel):
    """(center, half_extents) of the three boxes in the grasp frame.

    Frame axes: x = baseline, y = approach x baseline, z = approach; origin at
    the pose translation. The baseline center sits at z = -depth.
    """
    th = gripper.finger_thickness
    zb = -g.depth
    # fingers run from their tips (th/2 past the baseline) back by finger_length
    f_lo, f_hi = zb - gripper.finger_length, zb + 0.5 * th
    fz, fh = 0.5 * (f_lo + f_hi), 0.5 * (f_hi - f_lo)
    xoff = 0.5 * g.width + 0.5 * th
    palm_z = f_lo - 0.5 * th
    palm_half_x = max(0.5 * gripper.palm_width, xoff + 0.5 * th)
    return [
        (np.array([-xoff, 0.0, fz]), np.array([0.5 * th, 0.5 * th, fh])),
        (np.array([xoff, 0.0, fz]), np.array([0.5 * th, 0.5 * th, fh])),
        (np.array([0.0, 0.0, palm_z]), np.array([palm_half_x, 0.5 * th, 0.5 * th])),
    ]


def gripper_boxes_world(g: Grasp, gripper: GripperModel):
    """Boxes as (center, axes(3x3 columns), half_extents) in world coordinates."""
    m = grasp_pose_matrix(g)
    rot, t = m[:3, :3], m[:3, 3]
    return [(rot @ c + t, rot, h) for c, h in _box_specs(g, gripper)]


def check_collision(g: Grasp, gripper: GripperModel, scene, tree: Optional[cKDTree] = None) -> bool:
    """True when no scene point (outside 2 mm of either contact) is inside a box.

    ``tree`` is accepted for API symmetry; a dense transform of all points is
    cheaper than a ball query at desk-scale cloud sizes.
    """
    pts = scene.points if isinstance(scene, PointCloud) else np.asarray(scene, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return True
    m = grasp_pose_matrix(g)
    rot, t = m[:3, :3], m[:3, 3]
    # one contiguous coordinate at a time is much cheaper than (N, 3) reductions
    lz = pts @ rot[:, 2] - t @ rot[:, 2]
    for c, h in _box_specs(g, gripper):
        idx = np.nonzero(np.abs(lz - c[2]) < h[2])[0]
        for ax in (0, 1):
            if len(idx) == 0:
                break
            coord = pts[idx] @ rot[:, ax] - t @ rot[:, ax]
            idx = idx[np.abs(coord - c[ax]) < h[ax]]
        if len(idx) == 0:
            continue
        p = pts[idx]
        near = ((np.linalg.norm(p - g.contact, axis=1) <= CONTACT_EXCLUSION)
                | (np.linalg.norm(p - g.second_contact, axis=1) <= CONTACT_EXCLUSION))
        if not np.all(near):
            return False
    return True


@dataclass(frozen=True)
class SegmentMask:
    """Per-point target labels aligned with a scene cloud."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=bool).reshape(-1).copy()
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def all_target(cls, n: int) -> "SegmentMask":
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def from_dict(cls, d: dict, n: Optional[int] = None) -> "SegmentMask":
        if "labels" in d:
            return cls(np.asarray(d["labels"]).astype(bool))
        if "target_indices" in d:
            if n is None:
                raise ValueError("target_indices masks need the cloud size")
            lab = np.zeros(n, dtype=bool)
            lab[np.asarray(d["target_indices"], dtype=np.int64)] = True
            return cls(lab)
        raise ValueError("mask JSON needs 'labels' or 'target_indices'")


def filter_contacts(grasps: Sequence[Grasp], cloud, mask: SegmentMask, radius: float = 0.006) -> list[Grasp]:
    """Keep grasps whose both contacts snap (within radius) to target points."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(mask.labels) != len(pts):
        raise ValueError(f"mask has {len(mask.labels)} labels for {len(pts)} points")
    if not grasps:
        return []
    tree = cKDTree(pts)
    c1 = np.array([g.contact for g in grasps])
    c2 = np.array([g.second_contact for g in grasps])
    d1, i1 = tree.query(c1)
    d2, i2 = tree.query(c2)
    keep = (d1 <= radius) & (d2 <= radius) & mask.labels[i1] & mask.labels[i2]
    return [g for g, k in zip(grasps, keep) if k]


class GraspPlan(list):
    """Ranked grasps with the pipeline's bookkeeping in ``diagnostics``."""

    def __init__(self, grasps=(), diagnostics: Optional[dict] = None):
        super().__init__(grasps)
        self.diagnostics = diagnostics or {}


def rank_grasps(grasps: Sequence[Grasp]) -> list[Grasp]:
    """Score descending, then width ascending, then insertion order.

    Score and width are compared after rounding to 1e-9.
    """
    def key(k):
        return (-round(grasps[k].score, RANK_DECIMALS), round(grasps[k].width, RANK_DECIMALS), k)

    order = sorted(range(len(grasps)), key=key)
    return [grasps[k] for k in order]


def plan_grasps(cloud: PointCloud, mask: Optional[SegmentMask] = None, gripper: GripperModel = GripperModel(),
                mu: float = 1.0, top_k: int = 10, seed: int = 0, max_grasps: Optional[int] = 256,
                filter_radius: float = 0.006, up=DEFAULT_UP, side=DEFAULT_SIDE, **sampler_kw) -> GraspPlan:
    """sample -> filter_contacts -> check_collision -> rank -> top_k."""
    if mask is None:
        mask = SegmentMask.all_target(len(cloud))
    sampled = sample_antipodal_grasps(cloud, gripper, mu, max_grasps, seed, up=up, side=side, **sampler_kw)
    filtered = filter_contacts(sampled, cloud, mask, filter_radius)
    free = [g for g in filtered if check_collision(g, gripper, cloud.points)]
    ranked = rank_grasps(free)[:top_k]
    diag = {
        "sampled": len(sampled),
        "after_contact_filter": len(filtered),
        "collision_free": len(free),
        "returned": len(ranked),
        "feasible": bool(ranked),
    }
    if not ranked:
        diag["reason"] = "no feasible grasp"
    return GraspPlan(ranked, diag)


def grasps_to_json(grasps: Sequence[Grasp], diagnostics: Optional[dict] = None) -> str:
    doc = {"grasps": [g.to_dict() for g in grasps]}
    if diagnostics is not None:
        doc["diagnostics"] = diagnostics
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def grasps_from_json(text: str) -> list[Grasp]:
    doc = json.loads(text)
    items = doc["grasps"] if isinstance(doc, dict) else doc
    return [Grasp.from_dict(d) for d in items]
