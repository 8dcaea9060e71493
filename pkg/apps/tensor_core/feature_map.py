from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from apps.common.exceptions import ShapeError


@dataclass
class FeatureMap:
    """
    Dense rows x cols x channels feature grid with a per-cell coverage mask.

    Data is float32 unless a float64 array is passed in explicitly
    (finite-difference oracles run in 64-bit).
    """

    data: np.ndarray
    coverage: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"feature map needs 3 dims (rows, cols, channels), got {data.shape}")
        if data.dtype != np.float64:
            data = data.astype(np.float32, copy=False)
        self.data = np.ascontiguousarray(data)

        if self.coverage is None:
            self.coverage = np.ones(data.shape[:2], dtype=bool)
        else:
            coverage = np.asarray(self.coverage, dtype=bool)
            if coverage.shape != data.shape[:2]:
                raise ShapeError(f"coverage {coverage.shape} does not match cells {data.shape[:2]}")
            self.coverage = coverage

    @classmethod
    def zeros(cls, rows: int, cols: int, channels: int, covered: bool = True) -> "FeatureMap":
        coverage = np.full((rows, cols), covered, dtype=bool)
        return cls(np.zeros((rows, cols, channels), dtype=np.float32), coverage)

    @classmethod
    def filled(cls, rows: int, cols: int, channels: int, value: float) -> "FeatureMap":
        return cls(np.full((rows, cols, channels), value, dtype=np.float32))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.data.copy(), self.coverage.copy())

    def with_data(self, data: np.ndarray) -> "FeatureMap":
        """Same coverage, new values."""
        return FeatureMap(data, self.coverage.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def require_shape(self, other: "FeatureMap", what: str = "feature maps") -> None:
        if self.shape != other.shape:
            raise ShapeError(f"{what} differ in shape: {self.shape} vs {other.shape}")

    def require_cells(self, other: "FeatureMap", what: str = "feature maps") -> None:
        if self.shape[:2] != other.shape[:2]:
            raise ShapeError(f"{what} differ in spatial size: {self.shape[:2]} vs {other.shape[:2]}")
