"""Dynamic observation ranges for NDT scan-matching localization.

Synthetic urban scenes, an NDT map and Newton registration, map factors of a
local vicinity, random-forest error models per range, and the planner that
picks the shortest range predicted to meet an accuracy threshold.
"""

from .cloud import IDENTITY, CloudFormatError, Pose, PointCloud, apply_pose, crop_range, read_cloud, \
    voxel_filter, write_cloud
from .ndt import NdCell, NdtMap, RegConfig, RegistrationResult, build_ndt_map, ndt_gradient_hessian, \
    ndt_score, register

__version__ = "0.1.0"

__all__ = [
    "IDENTITY", "CloudFormatError", "Pose", "PointCloud", "apply_pose", "crop_range", "read_cloud",
    "voxel_filter", "write_cloud", "NdCell", "NdtMap", "RegConfig", "RegistrationResult", "build_ndt_map",
    "ndt_gradient_hessian", "ndt_score", "register",
]
