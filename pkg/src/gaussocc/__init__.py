"""Gaussian-splatting based 3D semantic occupancy on plain numpy.

Anisotropic semantic Gaussians are rendered into dense voxel grids, refined
by guidance-informed spatial aggregation across camera views, fused over time
with geometry-aware gating, and scored with occupancy IoU, mean IoU, and the
STCV temporal-consistency metric.
"""

from .core import (
    EMPTY_LABEL,
    Camera,
    CameraRig,
    DegenerateInputError,
    FeaturePlane,
    GaussianPrimitive,
    GridSpec,
    PipelineParams,
    Quaternion,
    RigidTransform,
    Rng,
    SceneConfig,
    VoxelGrid,
    covariance,
    init_parameters,
    point_to_index,
    quat_to_rotation,
    voxel_center,
)
from .metrics import (
    ConfusionCounts,
    StcvReport,
    StcvResult,
    confusion,
    mean_iou,
    occupancy_iou,
    per_class_iou,
    stcv,
    stcv_aggregate,
)
from .splat import SplatOutput, labels_from_logits, splat_bounded, splat_dense
from .temporal import Frame, FrameSequence, align_points, fuse_history, run_pipeline

__all__ = [
    "EMPTY_LABEL",
    "Camera",
    "CameraRig",
    "ConfusionCounts",
    "DegenerateInputError",
    "FeaturePlane",
    "Frame",
    "FrameSequence",
    "GaussianPrimitive",
    "GridSpec",
    "PipelineParams",
    "Quaternion",
    "RigidTransform",
    "Rng",
    "SceneConfig",
    "SplatOutput",
    "StcvReport",
    "StcvResult",
    "VoxelGrid",
    "align_points",
    "confusion",
    "covariance",
    "fuse_history",
    "init_parameters",
    "labels_from_logits",
    "mean_iou",
    "occupancy_iou",
    "per_class_iou",
    "point_to_index",
    "quat_to_rotation",
    "run_pipeline",
    "splat_bounded",
    "splat_dense",
    "stcv",
    "stcv_aggregate",
    "voxel_center",
]

__version__ = "0.1.0"
