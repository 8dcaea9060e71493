"""
Raster geometry of the BEV frame and the global map grid.

Ego frame: origin at the BEV rectangle center, +x forward, +y left.
BEV row 0 is the front edge, column 0 the left edge.
Global map cell (gx, gy) covers [gx*r, (gx+1)*r) x [gy*r, (gy+1)*r) with r
the map resolution; tile keys come from floor division by the tile edge.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Set

import numpy as np
from django.conf import settings

from apps.common.exceptions import ConfigurationError, ShapeError
from apps.tile_store.keys import TileKey
from .pose import EgoPose

MAX_CHANNELS = 256


@dataclass(frozen=True)
class GridSpec:
    resolution: float = 0.3
    bev_rows: int = 200
    bev_cols: int = 100
    channels: int = 32
    tile_edge: int = 64
    patch_size: int = 10
    map_resolution: Optional[float] = field(default=None)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ConfigurationError(f"resolution must be > 0, got {self.resolution}")
        if self.map_resolution is None:
            object.__setattr__(self, "map_resolution", float(self.resolution))
        if not self.map_resolution > 0:
            raise ConfigurationError(f"map resolution must be > 0, got {self.map_resolution}")
        if self.tile_edge <= 0 or self.tile_edge > 0xFFFF:
            raise ConfigurationError(f"tile edge must be in 1..65535, got {self.tile_edge}")
        if not 1 <= self.channels <= MAX_CHANNELS:
            raise ConfigurationError(f"channels must be in 1..{MAX_CHANNELS}, got {self.channels}")
        if self.patch_size <= 0:
            raise ConfigurationError(f"patch size must be > 0, got {self.patch_size}")
        if self.bev_rows <= 0 or self.bev_cols <= 0:
            raise ConfigurationError(f"BEV size must be positive, got {self.bev_rows}x{self.bev_cols}")
        if self.bev_rows % self.patch_size or self.bev_cols % self.patch_size:
            raise ConfigurationError(
                f"BEV {self.bev_rows}x{self.bev_cols} is not divisible by patch size {self.patch_size}"
            )

    @classmethod
    def from_settings(cls, preset: Optional[str] = None, **overrides) -> "GridSpec":
        resolution = float(overrides.pop("resolution", settings.NMP_RESOLUTION_M))
        patch = int(overrides.pop("patch_size", settings.NMP_PATCH_SIZE))
        rows, cols = bev_cells(preset or settings.NMP_BEV_PRESET, resolution, patch)
        values = {
            "resolution": resolution,
            "bev_rows": rows,
            "bev_cols": cols,
            "channels": settings.NMP_CHANNELS,
            "tile_edge": settings.NMP_TILE_EDGE,
            "patch_size": patch,
            "map_resolution": settings.NMP_MAP_RESOLUTION_M
            if settings.NMP_MAP_RESOLUTION_M != settings.NMP_RESOLUTION_M
            else None,
        }
        values.update(overrides)
        return cls(**values)

    def with_changes(self, **changes) -> "GridSpec":
        return replace(self, **changes)

    @property
    def bev_extent_m(self):
        return self.bev_rows * self.resolution, self.bev_cols * self.resolution

    @property
    def tile_extent_m(self) -> float:
        return self.tile_edge * self.map_resolution


def bev_cells(preset: str, resolution: float, patch_size: int):
    """Preset name ('60x30', '100x100', ...) to cell counts, floored to whole patches."""
    presets = settings.NMP_BEV_PRESETS
    if preset not in presets:
        raise ConfigurationError(f"unknown BEV preset '{preset}', expected one of {sorted(presets)}")
    forward_m, lateral_m = presets[preset]
    rows = int(math.floor(forward_m / resolution + 1e-9)) // patch_size * patch_size
    cols = int(math.floor(lateral_m / resolution + 1e-9)) // patch_size * patch_size
    if rows == 0 or cols == 0:
        raise ConfigurationError(f"preset {preset} is smaller than one patch at {resolution} m")
    return rows, cols


@dataclass
class GridCoords:
    """Per-BEV-cell global coordinates in meters, shape (rows, cols, 2)."""

    xy: np.ndarray

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64)
        if xy.ndim != 3 or xy.shape[2] != 2:
            raise ShapeError(f"grid coords must be (rows, cols, 2), got {xy.shape}")
        if not np.isfinite(xy).all():
            raise ShapeError("grid coords must be finite")
        self.xy = xy

    @property
    def shape(self):
        return self.xy.shape[:2]

    @property
    def x(self) -> np.ndarray:
        return self.xy[..., 0]

    @property
    def y(self) -> np.ndarray:
        return self.xy[..., 1]


def ego_cell_centers(spec: GridSpec) -> np.ndarray:
    rows, cols, res = spec.bev_rows, spec.bev_cols, spec.resolution
    ex = (rows / 2.0 - np.arange(rows) - 0.5) * res
    ey = (cols / 2.0 - np.arange(cols) - 0.5) * res
    centers = np.empty((rows, cols, 2))
    centers[..., 0] = ex[:, None]
    centers[..., 1] = ey[None, :]
    return centers


def local_grid_coords(spec: GridSpec, pose: EgoPose) -> GridCoords:
    return GridCoords(pose.to_global(ego_cell_centers(spec)))


def map_cell_index(spec: GridSpec, coords: GridCoords):
    """Global map cells containing each coordinate."""
    gx = np.floor(coords.x / spec.map_resolution).astype(np.int64)
    gy = np.floor(coords.y / spec.map_resolution).astype(np.int64)
    return gx, gy


def tile_keys_of_cells(spec: GridSpec, gx: np.ndarray, gy: np.ndarray) -> Set[TileKey]:
    tx = np.floor_divide(gx, spec.tile_edge).ravel()
    ty = np.floor_divide(gy, spec.tile_edge).ravel()
    if tx.size == 0:
        return set()
    pairs = np.unique(np.stack([tx, ty], axis=1), axis=0)
    return {TileKey(int(ix), int(iy)) for ix, iy in pairs}


def overlapping_tiles(spec: GridSpec, coords: GridCoords) -> Set[TileKey]:
    gx, gy = map_cell_index(spec, coords)
    return tile_keys_of_cells(spec, gx, gy)
