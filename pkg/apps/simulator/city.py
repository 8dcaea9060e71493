"""
Synthetic cities: a jittered grid of straight roads rasterized into
background / divider / crossing / boundary labels.

The ground-truth raster uses the global map-cell convention: labels[gx, gy]
covers [gx*r, (gx+1)*r) x [gy*r, (gy+1)*r).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
import shapely
from shapely.geometry import LineString, box
from shapely.ops import unary_union

from apps.common.exceptions import ConfigurationError, OutOfExtentError
from apps.geometry.grid import GridCoords
from .semantic import BACKGROUND, BOUNDARY, CROSSING, DIVIDER, SemanticMap

logger = logging.getLogger(__name__)

LINE_WIDTH_M = 0.5
ROAD_SPACING_M = 100.0
ROAD_WIDTH_RANGE_M = (6.0, 10.0)
JITTER_FRACTION = 0.15
CROSSING_GAP_M = 1.0
CROSSING_DEPTH_M = 3.0
MIN_EXTENT_M = 40.0

Extent = Union[float, Tuple[float, float]]


@dataclass(frozen=True)
class Road:
    """Straight axis-aligned road; `offset` is y for horizontal roads, x for vertical ones."""

    horizontal: bool
    offset: float
    width: float
    length: float

    @property
    def centerline(self) -> LineString:
        if self.horizontal:
            return LineString([(0.0, self.offset), (self.length, self.offset)])
        return LineString([(self.offset, 0.0), (self.offset, self.length)])

    @property
    def carriageway(self):
        return self.centerline.buffer(self.width / 2.0, cap_style="flat")


@dataclass
class CityMap:
    seed: int
    extent: Tuple[float, float]
    resolution: float
    roads: List[Road]
    ground_truth: SemanticMap
    road_fraction: float = field(default=0.0)

    @property
    def cells(self) -> Tuple[int, int]:
        return self.ground_truth.shape

    def _cell_index(self, coords: GridCoords):
        gx = np.floor(coords.x / self.resolution).astype(np.int64)
        gy = np.floor(coords.y / self.resolution).astype(np.int64)
        return gx, gy

    def contains(self, coords: GridCoords) -> bool:
        nx, ny = self.cells
        gx, gy = self._cell_index(coords)
        return bool((gx >= 0).all() and (gx < nx).all() and (gy >= 0).all() and (gy < ny).all())

    def labels_at(self, coords: GridCoords) -> np.ndarray:
        """Nearest-cell ground truth for every coordinate."""
        if not self.contains(coords):
            raise OutOfExtentError(f"footprint leaves the {self.extent[0]:g} x {self.extent[1]:g} m city")
        gx, gy = self._cell_index(coords)
        return self.ground_truth.labels[gx, gy]

    def north_up(self) -> SemanticMap:
        """Ground truth as an image raster: row 0 is the north edge, column 0 the west edge."""
        return SemanticMap(self.ground_truth.labels.T[::-1].copy())


def _extent_pair(extent: Extent) -> Tuple[float, float]:
    if isinstance(extent, (int, float)):
        extent = (extent, extent)
    width, height = (float(v) for v in extent)
    if not (math.isfinite(width) and math.isfinite(height)) or min(width, height) < MIN_EXTENT_M:
        raise ConfigurationError(f"city extent must be at least {MIN_EXTENT_M:g} m per side, got {extent}")
    return width, height


def _offsets(rng: np.random.Generator, length: float, spacing: float) -> List[float]:
    count = max(1, int(length // spacing))
    start = (length - (count - 1) * spacing) / 2.0
    jitter = JITTER_FRACTION * spacing
    return [start + k * spacing + rng.uniform(-jitter, jitter) for k in range(count)]


def _paint(labels: np.ndarray, geom, label: int, resolution: float) -> None:
    if geom.is_empty:
        return
    nx, ny = labels.shape
    minx, miny, maxx, maxy = geom.bounds
    i0, i1 = max(0, int(minx // resolution)), min(nx, int(maxx // resolution) + 1)
    j0, j1 = max(0, int(miny // resolution)), min(ny, int(maxy // resolution) + 1)
    if i0 >= i1 or j0 >= j1:
        return
    xs = (np.arange(i0, i1) + 0.5) * resolution
    ys = (np.arange(j0, j1) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    inside = shapely.contains_xy(geom, gx, gy)
    labels[i0:i1, j0:j1][inside] = label


def _crossings(h: Road, v: Road):
    """Bands across both roads just outside their intersection box."""
    bands = []
    half_h, half_v = h.width / 2.0, v.width / 2.0
    near_x, far_x = half_v + CROSSING_GAP_M, half_v + CROSSING_GAP_M + CROSSING_DEPTH_M
    near_y, far_y = half_h + CROSSING_GAP_M, half_h + CROSSING_GAP_M + CROSSING_DEPTH_M
    x, y = v.offset, h.offset
    bands.append(box(x + near_x, y - half_h, x + far_x, y + half_h))
    bands.append(box(x - far_x, y - half_h, x - near_x, y + half_h))
    bands.append(box(x - half_v, y + near_y, x + half_v, y + far_y))
    bands.append(box(x - half_v, y - far_y, x + half_v, y - near_y))
    return bands


def rasterize(roads: Sequence[Road], extent: Tuple[float, float], resolution: float) -> SemanticMap:
    nx = int(math.floor(extent[0] / resolution + 1e-9))
    ny = int(math.floor(extent[1] / resolution + 1e-9))
    labels = np.full((nx, ny), BACKGROUND, dtype=np.uint8)
    half_line = LINE_WIDTH_M / 2.0
    carriageways = [road.carriageway for road in roads]

    boundaries, dividers = [], []
    for i, road in enumerate(roads):
        others = unary_union([c for k, c in enumerate(carriageways) if k != i])
        for side in (-1.0, 1.0):
            edge = road.centerline.offset_curve(side * road.width / 2.0)
            boundaries.append(edge.difference(others) if not others.is_empty else edge)
        dividers.append(road.centerline.difference(others) if not others.is_empty else road.centerline)

    crossings = []
    for h in (r for r in roads if r.horizontal):
        for v in (r for r in roads if not r.horizontal):
            crossings.extend(_crossings(h, v))

    # later layers overwrite earlier ones
    for geom in boundaries:
        _paint(labels, geom.buffer(half_line, cap_style="flat"), BOUNDARY, resolution)
    for geom in dividers:
        _paint(labels, geom.buffer(half_line, cap_style="flat"), DIVIDER, resolution)
    for geom in crossings:
        _paint(labels, geom, CROSSING, resolution)
    return SemanticMap(labels)


def _road_fraction(roads: Sequence[Road], extent: Tuple[float, float]) -> float:
    area = box(0.0, 0.0, *extent)
    return float(unary_union([r.carriageway for r in roads]).intersection(area).area / area.area)


def generate_city(seed: int, extent: Extent = 400.0, resolution: float = 0.3,
                  spacing: float = ROAD_SPACING_M) -> CityMap:
    """Deterministic function of (seed, extent, resolution, spacing)."""
    if resolution <= 0:
        raise ConfigurationError(f"resolution must be > 0, got {resolution}")
    width, height = _extent_pair(extent)
    rng = np.random.default_rng(seed)

    roads = []
    for offset in _offsets(rng, height, spacing):
        roads.append(Road(True, offset, float(rng.uniform(*ROAD_WIDTH_RANGE_M)), width))
    for offset in _offsets(rng, width, spacing):
        roads.append(Road(False, offset, float(rng.uniform(*ROAD_WIDTH_RANGE_M)), height))

    ground_truth = rasterize(roads, (width, height), resolution)
    city = CityMap(seed, (width, height), resolution, roads, ground_truth, _road_fraction(roads, (width, height)))
    logger.debug(f"city seed={seed} extent={width:g}x{height:g} roads={len(roads)} road_fraction={city.road_fraction:.3f}")
    return city


def single_road_city(width: float = 6.0, extent: Extent = 60.0, resolution: float = 0.3) -> CityMap:
    """One horizontal road whose centerline runs through the middle row of cell centers."""
    extent = _extent_pair(extent)
    middle = int(math.floor(extent[1] / resolution + 1e-9)) // 2
    road = Road(True, (middle + 0.5) * resolution, float(width), extent[0])
    return CityMap(0, extent, resolution, [road], rasterize([road], extent, resolution),
                   _road_fraction([road], extent))
