"""SO(3)-equivariant representation learning for 3D volumes."""

__version__ = "0.1.0"

from .so3 import AxisAngle, RotationMatrix, compose, from_axis_angle, sample_uniform, transpose
from .volume import Volume, rotate, rotate_batch
from .config import Config, read_config, write_resolved

__all__ = [
    "AxisAngle", "RotationMatrix", "compose", "from_axis_angle", "sample_uniform", "transpose",
    "Volume", "rotate", "rotate_batch", "Config", "read_config", "write_resolved",
]
