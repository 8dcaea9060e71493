import time
from dataclasses import dataclass, field

import numpy as np

from apps.common.exceptions import ShapeError
from .keys import TileKey


@dataclass
class MapTile:
    """
    One tile_edge x tile_edge piece of the global prior.

    features: [edge, edge, C] float32, indexed [gx - ix*edge, gy - iy*edge].
    weight: [edge, edge] float32 accumulation weight; 0 means never written.
    """

    key: TileKey
    features: np.ndarray
    weight: np.ndarray
    version: int = 0
    traversal_count: int = 0
    last_updated: int = field(default=0)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float32)
        edge = self.features.shape[0]
        if self.features.ndim != 3 or self.features.shape[1] != edge:
            raise ShapeError(f"tile features must be [edge, edge, C], got {self.features.shape}")
        if self.weight.shape != (edge, edge):
            raise ShapeError(f"tile weight must be [{edge}, {edge}], got {self.weight.shape}")

    @classmethod
    def empty(cls, key: TileKey, edge: int, channels: int) -> "MapTile":
        return cls(key, np.zeros((edge, edge, channels), np.float32), np.zeros((edge, edge), np.float32))

    @property
    def edge(self) -> int:
        return int(self.weight.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[2])

    @property
    def written(self) -> np.ndarray:
        return self.weight > 0

    @property
    def written_cells(self) -> int:
        return int(np.count_nonzero(self.weight))

    @property
    def is_empty(self) -> bool:
        return self.written_cells == 0

    @property
    def payload_bytes(self) -> int:
        """Bytes held by written cells (features only, float32)."""
        return self.written_cells * self.channels * 4

    def origin(self):
        """Global cell index of local cell [0, 0]."""
        return self.key.ix * self.edge, self.key.iy * self.edge

    def copy(self) -> "MapTile":
        return MapTile(self.key, self.features.copy(), self.weight.copy(),
                       self.version, self.traversal_count, self.last_updated)

    def touch(self, now: int = None) -> None:
        self.last_updated = int(time.time()) if now is None else int(now)

    def same_content(self, other: "MapTile") -> bool:
        return (
            self.key == other.key
            and self.version == other.version
            and self.traversal_count == other.traversal_count
            and self.last_updated == other.last_updated
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.features, other.features)
        )
