"""Planar pose utilities shared by the simulator, the mapper and the matcher."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(angle: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ValueError(f"non-finite pose {self.x}, {self.y}, {self.heading}")
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    @classmethod
    def from_array(cls, v) -> "Pose2":
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s], [s, c]])

    def compose(self, other: "Pose2") -> "Pose2":
        """Return self * other (other expressed in self's frame)."""
        x, y = transform_point(self, (other.x, other.y))
        return Pose2(x, y, self.heading + other.heading)

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.heading)


def transform_point(pose: Pose2, s) -> np.ndarray:
    """Map a point from the scan frame into the frame that ``pose`` lives in."""
    c, sn = math.cos(pose.heading), math.sin(pose.heading)
    sx, sy = float(s[0]), float(s[1])
    return np.array([c * sx - sn * sy + pose.x, sn * sx + c * sy + pose.y])


def transform_points(pose: Pose2, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`transform_point` over an (N, 2) array."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    return points @ pose.rotation().T + np.array([pose.x, pose.y])


def angle_diff(a: float, b: float) -> float:
    """Smallest signed difference a - b."""
    return wrap_angle(a - b)


def pose_error(estimate: Pose2, truth: Pose2) -> tuple[float, float]:
    """Planar distance and the smallest signed heading difference (estimate - truth)."""
    dxy = math.hypot(estimate.x - truth.x, estimate.y - truth.y)
    return dxy, angle_diff(estimate.heading, truth.heading)
