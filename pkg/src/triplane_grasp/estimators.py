"""scikit-learn style wrappers around the point-cloud stages.

Inputs are ``(N, 3)`` arrays (or :class:`PointCloud`), validated with
:func:`check_points`. Each wrapper keeps its hyperparameters as constructor
arguments so ``get_params``/``set_params``/``clone`` work as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .geometry import PointCloud, estimate_normals, normalize_cloud, resample_cloud
from .grasping import GraspPlan, GripperModel, SegmentMask, plan_grasps
from .pipeline import densify
from .triplane import query_batch, synthesize_triplane


def check_points(X, min_points: int = 1) -> np.ndarray:
    """Finite float64 array of shape (N, 3) with N >= ``min_points``."""
    if isinstance(X, PointCloud):
        X = X.points
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_points)
    if X.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {X.shape}")
    return X


def check_cloud(X, min_points: int = 1) -> PointCloud:
    if isinstance(X, PointCloud):
        check_points(X, min_points)
        return X
    return PointCloud(check_points(X, min_points))


class CloudNormalizer(BaseEstimator, TransformerMixin):
    """Centroid-centre and scale to unit maximum radius, learned on fit."""

    def fit(self, X, y=None):
        _, self.scale_, self.center_ = normalize_cloud(check_cloud(X, 2))
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        return (check_points(X) - self.center_) * self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        return check_points(X) / self.scale_ + self.center_


class CloudResampler(BaseEstimator, TransformerMixin):
    """FPS down / jittered replication up to exactly ``n_points``."""

    def __init__(self, n_points: int = 16384, seed: int = 0):
        self.n_points = n_points
        self.seed = seed

    def fit(self, X, y=None):
        check_points(X)
        return self

    def transform(self, X):
        return resample_cloud(check_cloud(X), self.n_points, self.seed).points


class Densifier(BaseEstimator, TransformerMixin):
    """Two-round tangent-plane splitting up to ``n_points``."""

    def __init__(self, n_points: int = 16384, seed: int = 0, k: int = 8):
        self.n_points = n_points
        self.seed = seed
        self.k = k

    def fit(self, X, y=None):
        check_points(X)
        return self

    def transform(self, X):
        return densify(check_cloud(X), self.n_points, self.seed, self.k).points


class TriplaneFeatureEncoder(BaseEstimator, TransformerMixin):
    """Fit synthesizes a triplane from a cloud; transform queries features."""

    def __init__(self, channels: int = 32, height: int = 64, width: int = 64, padding: float = 0.1,
                 normal_k: int = 16):
        self.channels = channels
        self.height = height
        self.width = width
        self.padding = padding
        self.normal_k = normal_k

    def fit(self, X, y=None):
        cloud = check_cloud(X, 3)
        if cloud.normals is None:
            cloud = estimate_normals(cloud, k=min(self.normal_k, len(cloud)))
        self.triplane_ = synthesize_triplane(cloud, self.channels, self.height, self.width, self.padding)
        return self

    def transform(self, X):
        check_is_fitted(self, "triplane_")
        return query_batch(self.triplane_, check_points(X))


class GraspPlanner(BaseEstimator):
    """Fit stores the scene cloud (and optional per-point target labels);
    predict returns the ranked grasp plan."""

    def __init__(self, mu: float = 1.0, top_k: int = 10, seed: int = 0, max_grasps: int = 256,
                 gripper: GripperModel | None = None, normal_k: int = 16, up=(0.0, 0.0, 1.0),
                 side=(1.0, 0.0, 0.0)):
        self.mu = mu
        self.top_k = top_k
        self.seed = seed
        self.max_grasps = max_grasps
        self.gripper = gripper
        self.normal_k = normal_k
        self.up = up
        self.side = side

    def _prepare(self, X) -> PointCloud:
        cloud = check_cloud(X, 3)
        if cloud.normals is None:
            cloud = estimate_normals(cloud, k=min(self.normal_k, len(cloud)))
        return cloud

    def fit(self, X, y=None):
        self.cloud_ = self._prepare(X)
        n = len(self.cloud_)
        self.mask_ = SegmentMask.all_target(n) if y is None else SegmentMask(np.asarray(y, dtype=bool))
        return self

    def predict(self, X=None) -> GraspPlan:
        """Plan on the fitted cloud, or on ``X`` (all points target) when given."""
        if X is None:
            check_is_fitted(self, "cloud_")
            cloud, mask = self.cloud_, self.mask_
        else:
            cloud = self._prepare(X)
            mask = SegmentMask.all_target(len(cloud))
        return plan_grasps(cloud, mask, self.gripper or GripperModel(), self.mu, self.top_k,
                           self.seed, self.max_grasps, up=self.up, side=self.side)
