"""Indicator-field surface reconstruction from oriented, sensor-located scans.

A sine-activated MLP is fit so its value approximates a zero-centered
indicator function (-0.5 outside, +0.5 inside) of the scanned solid, using a
gradient constraint against the point normals, a surface constraint at the
observed points and an empty-space constraint along sensor rays.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, DegenerateInput, EmptyInput, EmptyMesh, EmptyScene,
                     IndifieldError, InvalidArgument, IoError, NumericalError, ParseError,
                     UndefinedDistanceField)
from .geom import KdTree, OrientedPointCloud, SensorSet, TriangleMesh, VoxelGrid
from .siren import SirenField, load_checkpoint, save_checkpoint

__all__ = [
    "CheckpointError", "DegenerateInput", "EmptyInput", "EmptyMesh", "EmptyScene",
    "IndifieldError", "InvalidArgument", "IoError", "KdTree", "NumericalError",
    "OrientedPointCloud", "ParseError", "SensorSet", "SirenField", "TriangleMesh",
    "UndefinedDistanceField", "VoxelGrid", "load_checkpoint", "save_checkpoint",
]
