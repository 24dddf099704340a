"""Feed-forward sparse-view reconstruction on procedural synthetic scenes.

The package implements a cascade that maps a handful of RGB views to camera
poses, dense point maps and a renderable 3D Gaussian scene:

1. coarse camera poses from a decoder-only transformer,
2. pose-conditioned camera-centric point maps plus refined poses,
3. projection of the camera-centric geometry into a global frame,
4. per-pixel 3D Gaussians rendered with a differentiable EWA splatter.

Everything is plain PyTorch and runs on CPU; see the README for the CLI.
"""

from .core import (
    CAMERA_FRAME,
    WORLD_FRAME,
    CameraPose,
    ConfidenceMap,
    Intrinsics,
    PointMap,
    huber,
    pointmap_scale,
    quat_angle,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_rotmat,
    rotmat_to_quat,
    save_pointcloud_ply,
    similarity_align,
    transform_pointmap,
)

__all__ = [
    "CAMERA_FRAME",
    "WORLD_FRAME",
    "CameraPose",
    "ConfidenceMap",
    "Intrinsics",
    "PointMap",
    "huber",
    "pointmap_scale",
    "quat_angle",
    "quat_from_axis_angle",
    "quat_multiply",
    "quat_normalize",
    "quat_rotate",
    "quat_to_rotmat",
    "rotmat_to_quat",
    "save_pointcloud_ply",
    "similarity_align",
    "transform_pointmap",
]

__version__ = "0.1.0"
