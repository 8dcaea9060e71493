import math
from dataclasses import dataclass

import numpy as np

from apps.common.exceptions import ShapeError


def normalize_yaw(yaw: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(float(yaw), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class EgoPose:
    """Planar ego pose in the global frame: meters, meters, radians."""

    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @classmethod
    def from_matrix(cls, matrix) -> "EgoPose":
        """Project a 4x4 homogeneous ego-to-global transform onto the ground plane."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeError(f"pose matrix must be 4x4, got {m.shape}")
        yaw = math.atan2(m[1, 0], m[0, 0])
        return cls(m[0, 3], m[1, 3], yaw)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def to_global(self, points: np.ndarray) -> np.ndarray:
        """Ego-frame (..., 2) points to global (..., 2)."""
        return points @ self.rotation().T + np.array([self.x, self.y])

    def to_ego(self, points: np.ndarray) -> np.ndarray:
        return (points - np.array([self.x, self.y])) @ self.rotation()
