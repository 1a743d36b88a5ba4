"""Point-cloud and image metrics plus the weighted reconstruction loss."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import as_points, farthest_point_indices
from .renderer import Image

EXACT_EMD_MAX = 512


def _nn_dist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def chamfer_distance(a, b) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    pa, pb = as_points(a), as_points(b)
    return float(np.mean(_nn_dist(pa, pb) ** 2) + np.mean(_nn_dist(pb, pa) ** 2))


def f_score(a, b, threshold: float = 0.02) -> float:
    """Harmonic mean of precision (a covered by b) and recall (b covered by a)."""
    pa, pb = as_points(a), as_points(b)
    precision = float(np.mean(_nn_dist(pa, pb) <= threshold))
    recall = float(np.mean(_nn_dist(pb, pa) <= threshold))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def chamfer_and_fscore(a, b, threshold: float = 0.02) -> tuple[float, float]:
    """Both metrics from one pair of nearest-neighbour passes."""
    pa, pb = as_points(a), as_points(b)
    dab, dba = _nn_dist(pa, pb), _nn_dist(pb, pa)
    cd = float(np.mean(dab ** 2) + np.mean(dba ** 2))
    precision, recall = float(np.mean(dab <= threshold)), float(np.mean(dba <= threshold))
    fs = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return cd, fs


@dataclass(frozen=True)
class EMDResult:
    value: float
    gap: float  # certified relative optimality gap (0 for the exact solver)
    lower_bound: float
    method: str


def _cost_rows(pa, pb, rows):
    diff = pa[rows, None, :] - pb[None, :, :]
    return np.sqrt(np.einsum("rjk,rjk->rj", diff, diff))


def _auction(pa: np.ndarray, pb: np.ndarray, rel_gap: float = 0.01, chunk: int = 256,
             max_rounds: int = 200000):
    """Epsilon-scaling auction for min-cost perfect matching.

    Costs are evaluated on the fly in row chunks so memory stays O(N * chunk).
    Stops once the dual bound certifies ``(primal - dual) / primal <= rel_gap``.
    """
    n = len(pa)
    benefit_scale = np.sqrt(np.sum((pa.max(0) - pa.min(0)) ** 2 + (pb.max(0) - pb.min(0)) ** 2)) + 1e-300
    prices = np.zeros(n)
    eps = benefit_scale / 4.0
    assign = np.full(n, -1, dtype=np.int64)
    while True:
        assign = np.full(n, -1, dtype=np.int64)
        owner = np.full(n, -1, dtype=np.int64)
        rounds = 0
        while True:
            free = np.nonzero(assign < 0)[0]
            if len(free) == 0:
                break
            rounds += 1
            if rounds > max_rounds:
                raise RuntimeError("auction did not converge")
            bid_obj = np.empty(len(free), dtype=np.int64)
            bid_val = np.empty(len(free))
            for s in range(0, len(free), chunk):
                rows = free[s:s + chunk]
                values = -_cost_rows(pa, pb, rows) - prices[None, :]
                best = np.argmax(values, axis=1)
                v1 = values[np.arange(len(rows)), best]
                values[np.arange(len(rows)), best] = -np.inf
                v2 = values.max(axis=1) if n > 1 else v1
                bid_obj[s:s + len(rows)] = best
                bid_val[s:s + len(rows)] = prices[best] + (v1 - v2) + eps
            # highest bid per object wins; ties go to the lowest bidder index
            order = np.lexsort((free, -bid_val, bid_obj))
            first = np.ones(len(order), dtype=bool)
            first[1:] = bid_obj[order][1:] != bid_obj[order][:-1]
            winners = order[first]
            objs = bid_obj[winners]
            prev = owner[objs]
            assign[prev[prev >= 0]] = -1
            assign[free[winners]] = objs
            owner[objs] = free[winners]
            prices[objs] = bid_val[winners]
        primal = float(np.sum(np.linalg.norm(pa - pb[assign], axis=1)))
        # dual of the max-benefit problem: sum(prices) + sum_i max_j(-c_ij - p_j)
        profit = np.empty(n)
        for s in range(0, n, chunk):
            rows = np.arange(s, min(s + chunk, n))
            profit[rows] = np.max(-_cost_rows(pa, pb, rows) - prices[None, :], axis=1)
        lower = -(float(np.sum(prices)) + float(np.sum(profit)))
        gap = (primal - lower) / primal if primal > 0 else 0.0
        if gap <= rel_gap or eps < 1e-12 * benefit_scale:
            return assign, primal, max(lower, 0.0), max(gap, 0.0)
        eps /= 5.0


def earth_mover_distance(a, b, return_result: bool = False, rel_gap: float = 0.01):
    """Mean Euclidean cost of the optimal one-to-one matching.

    Exact (Hungarian) up to ``EXACT_EMD_MAX`` points, auction with a
    certified relative gap above that.
    """
    pa, pb = as_points(a), as_points(b)
    if len(pa) != len(pb):
        raise ValueError(
            f"EMD needs equal cardinality ({len(pa)} vs {len(pb)}); resample with resample_cloud first")
    n = len(pa)
    if n <= EXACT_EMD_MAX:
        cost = np.sqrt(np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2))
        rows, cols = linear_sum_assignment(cost)
        value = float(cost[rows, cols].sum() / n)
        res = EMDResult(value, 0.0, value, "hungarian")
    else:
        _, primal, lower, gap = _auction(pa, pb, rel_gap=rel_gap)
        res = EMDResult(primal / n, gap, lower / n, "auction")
    return res if return_result else res.value


def _as_pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def mse(a, b) -> float:
    pa, pb = _as_pixels(a), _as_pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image sizes differ: {pa.shape} vs {pb.shape}")
    return float(np.mean((pa - pb) ** 2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted window sum, keeping only fully-covered positions."""
    half = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows, averaged over channels."""
    pa, pb = _as_pixels(a), _as_pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image sizes differ: {pa.shape} vs {pb.shape}")
    if min(pa.shape[:2]) < window:
        raise ValueError(f"images must be at least {window}x{window} for SSIM")
    if pa.ndim == 2:
        pa, pb = pa[..., None], pb[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(window, sigma)
    vals = []
    for ch in range(pa.shape[2]):
        x, y = pa[..., ch], pb[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class LossConfig:
    """Loss weights. LPIPS needs a pretrained network, so it is an optional hook."""

    lambda_cd: float = 10.0
    lambda_emd: float = 10.0
    lambda_ssim: float = 1.0
    lambda_lpips: float = 2.0
    fscore_threshold: float = 0.02
    lpips_hook: Optional[Callable[[Image, Image], float]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("lambda_cd", "lambda_emd", "lambda_ssim", "lambda_lpips"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if not self.fscore_threshold > 0:
            raise ValueError("fscore_threshold must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("lpips_hook")
        d["lpips_hook"] = self.lpips_hook is not None
        return d


@dataclass
class MetricReport:
    cd: float
    emd: float
    emd_gap: float
    fscore: float
    mse: Optional[float]
    ssim: Optional[float]
    geo_loss: float
    render_loss: float
    total: float
    per_view: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    emd_method: str = "hungarian"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        kw.setdefault("indent", 2)
        kw.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kw)


def composite_loss(config: LossConfig, pred_cloud, gt_cloud, rendered: Sequence[Image] = (),
                   gt_views: Sequence[Image] = (), emd_points: Optional[int] = None) -> MetricReport:
    """Geometry loss (weighted CD + EMD) plus the view-averaged rendering loss.

    The SSIM term enters as ``1 - SSIM``; the LPIPS term is 0 unless a hook
    is installed. With ``emd_points`` the EMD uses farthest-point subsets of
    that size from both clouds.
    """
    if len(rendered) != len(gt_views):
        raise ValueError(f"{len(rendered)} rendered views vs {len(gt_views)} ground-truth views")
    cd, fs = chamfer_and_fscore(pred_cloud, gt_cloud, config.fscore_threshold)
    pa, pb = as_points(pred_cloud), as_points(gt_cloud)
    if emd_points is not None:
        pa = pa[farthest_point_indices(pa, emd_points)]
        pb = pb[farthest_point_indices(pb, emd_points)]
    emd = earth_mover_distance(pa, pb, return_result=True)
    geo = config.lambda_cd * cd + config.lambda_emd * emd.value

    per_view = []
    render_sum = 0.0
    for r, g in zip(rendered, gt_views):
        m = mse(r, g)
        s = ssim(r, g)
        lp = float(config.lpips_hook(r, g)) if config.lpips_hook is not None else 0.0
        term = m + config.lambda_ssim * (1.0 - s) + config.lambda_lpips * lp
        per_view.append({"mse": m, "ssim": s, "lpips": lp, "loss": term})
        render_sum += term
    n = len(per_view)
    render_loss = render_sum / n if n else 0.0
    return MetricReport(
        cd=cd, emd=emd.value, emd_gap=emd.gap, fscore=fs,
        mse=float(np.mean([v["mse"] for v in per_view])) if n else None,
        ssim=float(np.mean([v["ssim"] for v in per_view])) if n else None,
        geo_loss=geo, render_loss=render_loss, total=geo + render_loss,
        per_view=per_view, weights=config.to_dict(), emd_method=emd.method,
    )
