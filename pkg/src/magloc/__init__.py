"""Magnetic-assisted initialization for lidar localization in repetitive corridors."""

from .geometry import Pose2, pose_error, transform_point, wrap_angle

__version__ = "0.1.0"
