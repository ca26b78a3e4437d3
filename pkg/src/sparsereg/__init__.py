"""Registration of sparse 3D face sequences: synthetic data, ICP baseline,
a small learned pose regressor, fusion and benchmarking."""

from .cloud import CoordinateMap, DepthMap, PointCloud, rasterize_coordinate_map, to_depth_map
from .errors import SparseRegError
from .pose_math import AxisAngle, EulerAngles, RigidTransform, UnitQuaternion, rotation_error, translation_error

__all__ = [
    "AxisAngle", "CoordinateMap", "DepthMap", "EulerAngles", "PointCloud", "RigidTransform",
    "SparseRegError", "UnitQuaternion", "rasterize_coordinate_map", "rotation_error", "to_depth_map",
    "translation_error",
]
__version__ = "0.1.0"
