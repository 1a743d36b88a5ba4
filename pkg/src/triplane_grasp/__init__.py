"""Triplane-Gaussian reconstruction primitives, point-cloud metrics and
contact-anchored parallel-jaw grasp planning."""
from .gaussians import DecoderWeights, GaussianSet, GaussianSplat, decode_gaussian, decode_gaussians, evaluate_sh
from .geometry import (CameraModel, DegenerateCloudError, PointCloud, RigidTransform, Rotation, estimate_normals,
                       normalize_cloud, resample_cloud)
from .grasping import (Grasp, GripperModel, SegmentMask, check_collision, filter_contacts, friction_cone_score,
                       grasp_pose, plan_grasps, sample_antipodal_grasps)
from .losses import LossConfig, MetricReport, chamfer_distance, composite_loss, earth_mover_distance, f_score, ssim
from .pipeline import (FileReconstructor, OracleReconstructor, PipelineConfig, densify, evaluate, reconstruct)
from .renderer import Image, render, render_naive
from .scene import Primitive, SceneDescriptor
from .triplane import Triplane, query, query_batch

__version__ = "0.1.0"
