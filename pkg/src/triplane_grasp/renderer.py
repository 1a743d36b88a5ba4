"""Forward Gaussian-splatting rasterizer.

Splat footprints are truncated at the 3-sigma ellipse (Mahalanobis distance
squared > 9 contributes nothing). Tiles receive every splat whose ellipse
bounding box overlaps them, so the tiled and naive renderers see exactly the
same non-zero contributions in the same depth order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gaussians import GaussianSet, GaussianSplat, evaluate_sh
from .geometry import CameraModel, Rotation

NEAR_PLANE = 0.01
COV_FLOOR = 0.3
CUTOFF_SIGMA = 3.0
T_MIN = 1e-4
TILE = 16


@dataclass(frozen=True)
class Image:
    """RGB image, float in [0, 1], shape (height, width, 3)."""

    pixels: np.ndarray
    alpha: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {px.shape}")
        if np.any(px < 0) or np.any(px > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        if self.alpha is not None:
            al = np.asarray(self.alpha, dtype=np.float64)
            if al.shape != px.shape[:2]:
                raise ValueError("alpha must match the image size")
            object.__setattr__(self, "alpha", al)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def filled(cls, width: int, height: int, rgb) -> "Image":
        return cls(np.broadcast_to(np.asarray(rgb, dtype=np.float64), (height, width, 3)).copy())

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255).astype(np.uint8)

    def save_png(self, path, with_alpha: bool = False) -> None:
        from PIL import Image as PILImage

        arr = self.to_uint8()
        if with_alpha and self.alpha is not None:
            a = np.round(self.alpha * 255).astype(np.uint8)[..., None]
            PILImage.fromarray(np.concatenate([arr, a], axis=2), "RGBA").save(path)
        else:
            PILImage.fromarray(arr, "RGB").save(path)

    @classmethod
    def load_png(cls, path) -> "Image":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
        return cls(arr[..., :3], arr[..., 3])


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class _Projected:
    """Batched projection result for the visible subset."""

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # inverse covariance
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    bbox: np.ndarray  # (n, 4) xmin, xmax, ymin, ymax of the 3-sigma ellipse
    skipped: int = 0


def quat_to_matrices(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def covariance_3d(scales, quats) -> np.ndarray:
    r = quat_to_matrices(quats)
    s2 = np.asarray(scales, dtype=np.float64).reshape(-1, 3) ** 2
    return np.einsum("nij,nj,nkj->nik", r, s2, r)


def _project_all(gs: GaussianSet, cam: CameraModel) -> _Projected:
    rot = cam.extrinsic.rotation.as_matrix()
    p_cam = gs.positions @ rot.T + cam.extrinsic.translation
    z = p_cam[:, 2]
    keep = z > NEAR_PLANE
    idx = np.nonzero(keep)[0]
    pc = p_cam[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z ** 2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z ** 2
    sigma = covariance_3d(gs.scales[idx], gs.rotations[idx])
    sigma_cam = np.einsum("ij,njk,lk->nil", rot, sigma, rot)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, sigma_cam, jac)
    cov2d = 0.5 * (cov2d + cov2d.transpose(0, 2, 1))
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    invertible = np.isfinite(det) & (det > 0) & np.all(np.isfinite(cov2d), axis=(1, 2))
    skipped = int((~invertible).sum())

    half_x = CUTOFF_SIGMA * np.sqrt(np.where(invertible, cov2d[:, 0, 0], 0.0))
    half_y = CUTOFF_SIGMA * np.sqrt(np.where(invertible, cov2d[:, 1, 1], 0.0))
    bbox = np.stack([mean2d[:, 0] - half_x, mean2d[:, 0] + half_x,
                     mean2d[:, 1] - half_y, mean2d[:, 1] + half_y], axis=1)
    on_screen = ((bbox[:, 1] >= -0.5) & (bbox[:, 0] <= cam.width - 0.5)
                 & (bbox[:, 3] >= -0.5) & (bbox[:, 2] <= cam.height - 0.5))
    sel = invertible & on_screen

    dirs = gs.positions[idx[sel]] - cam.center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    color = evaluate_sh(gs.sh[idx[sel]], gs.sh_degree, dirs).reshape(-1, 3)
    c = cov2d[sel]
    d = det[sel]
    conic = np.stack([np.stack([c[:, 1, 1], -c[:, 0, 1]], -1), np.stack([-c[:, 1, 0], c[:, 0, 0]], -1)], 1) / d[:, None, None]
    return _Projected(idx[sel], mean2d[sel], c, conic, z[sel], color, gs.opacities[idx[sel]], bbox[sel], skipped)


def project_gaussian(splat: GaussianSplat, cam: CameraModel) -> Optional[ProjectedGaussian]:
    """Project one splat; returns None when it is culled."""
    gs = GaussianSet.from_splats([splat])
    pr = _project_all(gs, cam)
    if len(pr.index) == 0:
        return None
    return ProjectedGaussian(pr.mean2d[0], pr.cov2d[0], float(pr.depth[0]), pr.color[0], float(pr.opacity[0]))


def _depth_order(gs: GaussianSet, pr: _Projected) -> np.ndarray:
    """Sort by depth; exact ties fall back on splat content, then input index.

    Keying ties on content rather than position in the input list keeps the
    image invariant under any permutation of the input.
    """
    i = pr.index
    keys = [i]  # last resort, only reached by identical splats
    keys += [gs.sh[i].reshape(len(i), -1)[:, k] for k in range(gs.sh[i].reshape(len(i), -1).shape[1] - 1, -1, -1)]
    keys += [gs.rotations[i, k] for k in (3, 2, 1, 0)]
    keys += [gs.scales[i, k] for k in (2, 1, 0)]
    keys += [pr.opacity]
    keys += [gs.positions[i, k] for k in (2, 1, 0)]
    keys += [pr.depth]
    return np.lexsort(keys)


def _weights(pr: _Projected, order, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Alpha of each ordered splat at each pixel -> (n, P)."""
    dx = px[None, :] - pr.mean2d[order, 0, None]
    dy = py[None, :] - pr.mean2d[order, 1, None]
    a = pr.conic[order, 0, 0, None]
    b = pr.conic[order, 0, 1, None]
    c = pr.conic[order, 1, 1, None]
    power = a * dx * dx + 2 * b * dx * dy + c * dy * dy
    w = pr.opacity[order, None] * np.exp(-0.5 * power)
    return np.where(power <= CUTOFF_SIGMA ** 2, w, 0.0)


def render(gs: GaussianSet, cam: CameraModel, background=(0.0, 0.0, 0.0), tile: int = TILE) -> Image:
    """Tile-based front-to-back compositing."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = cam.height, cam.width
    if len(gs) == 0:
        return Image(np.broadcast_to(bg, (H, W, 3)).copy(), np.zeros((H, W)), {"skipped": 0, "visible": 0})
    pr = _project_all(gs, cam)
    order = _depth_order(gs, pr)
    color = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    for ty in range(0, H, tile):
        for tx in range(0, W, tile):
            y1, x1 = min(ty + tile, H), min(tx + tile, W)
            hits = order[(pr.bbox[order, 1] >= tx - 0.5) & (pr.bbox[order, 0] <= x1 - 0.5)
                         & (pr.bbox[order, 3] >= ty - 0.5) & (pr.bbox[order, 2] <= y1 - 0.5)]
            if len(hits) == 0:
                continue
            yy, xx = np.mgrid[ty:y1, tx:x1]
            w = _weights(pr, hits, xx.ravel().astype(np.float64), yy.ravel().astype(np.float64))
            t_after = np.cumprod(1.0 - w, axis=0)
            t_before = np.vstack([np.ones((1, w.shape[1])), t_after[:-1]])
            live = t_before >= T_MIN
            contrib = np.where(live, t_before * w, 0.0)
            c = contrib.T @ pr.color[hits]
            # transmittance after the last composited splat
            n_live = live.sum(axis=0)
            t_end = np.where(n_live > 0, t_after[np.maximum(n_live - 1, 0), np.arange(w.shape[1])], 1.0)
            color[ty:y1, tx:x1] = c.reshape(y1 - ty, x1 - tx, 3)
            trans[ty:y1, tx:x1] = t_end.reshape(y1 - ty, x1 - tx)
    out = np.clip(color + trans[..., None] * bg, 0.0, 1.0)
    return Image(out, 1.0 - trans, {"skipped": pr.skipped, "visible": int(len(pr.index))})


def render_naive(gs: GaussianSet, cam: CameraModel, background=(0.0, 0.0, 0.0)) -> Image:
    """Reference compositor: every visible splat against every pixel, one at a time."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    if len(gs):
        pr = _project_all(gs, cam)
        order = _depth_order(gs, pr)
        yy, xx = np.mgrid[0:H, 0:W]
        px, py = xx.ravel().astype(np.float64), yy.ravel().astype(np.float64)
        color = color.reshape(-1, 3)
        trans = trans.ravel()
        for k in order:
            w = _weights(pr, np.array([k]), px, py)[0]
            active = trans >= T_MIN
            w = np.where(active, w, 0.0)
            color += (trans * w)[:, None] * pr.color[k]
            trans = trans * (1.0 - w)
        color = color.reshape(H, W, 3)
        trans = trans.reshape(H, W)
    return Image(np.clip(color + trans[..., None] * bg, 0.0, 1.0), 1.0 - trans)
