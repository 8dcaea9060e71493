import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from apps.common.exceptions import ConfigurationError
from apps.geometry.grid import GridSpec, local_grid_coords
from apps.geometry.pose import EgoPose
from .city import CityMap, Road
from .conditions import Condition

logger = logging.getLogger(__name__)

DEFAULT_SPACING_M = 10.0
FRAME_SEED_STRIDE = 100_003


@dataclass
class TripPlan:
    vehicle_id: str
    poses: List[EgoPose]
    condition: Condition
    seed: int = 0
    road: Optional[Road] = field(default=None, repr=False)

    def __len__(self):
        return len(self.poses)

    def frame_seed(self, index: int) -> int:
        return self.seed * FRAME_SEED_STRIDE + index


def route_poses(city: CityMap, spec: GridSpec, road: Road, forward: bool, spacing_m: float) -> List[EgoPose]:
    """Lattice poses along `road` whose BEV footprint stays inside the city."""
    res = spec.resolution
    step = max(1, int(round(spacing_m / res))) * res
    lane = round(road.offset / res) * res
    half = spec.bev_rows * res / 2.0
    first = math.ceil(half / res) * res
    stations = np.arange(first, road.length - half + 1e-9, step)
    if road.horizontal:
        yaw = 0.0 if forward else math.pi
        candidates = [EgoPose(float(s), lane, yaw) for s in stations]
    else:
        yaw = math.pi / 2 if forward else -math.pi / 2
        candidates = [EgoPose(lane, float(s), yaw) for s in stations]
    if not forward:
        candidates.reverse()
    return [p for p in candidates if city.contains(local_grid_coords(spec, p))]


def plan_trips(city: CityMap, spec: GridSpec, count: int, condition: Condition, seed: int,
               spacing_m: float = DEFAULT_SPACING_M, repeat: bool = False,
               frames: Optional[int] = None) -> List[TripPlan]:
    """
    `count` trips along randomly chosen roads; with `repeat` every trip drives
    the route of the first one. Trips differ in their noise seeds either way.
    """
    if count < 0:
        raise ConfigurationError(f"trip count must be >= 0, got {count}")
    if not 0 < spacing_m < spec.bev_extent_m[0]:
        raise ConfigurationError(
            f"pose spacing {spacing_m} m must be positive and below the {spec.bev_extent_m[0]:g} m BEV depth"
        )
    rng = np.random.default_rng(seed)
    trip_seeds = rng.integers(0, 2**31 - 1, size=count)

    trips: List[TripPlan] = []
    route = None
    for i in range(count):
        if route is None or not repeat:
            road = city.roads[int(rng.integers(len(city.roads)))]
            poses = route_poses(city, spec, road, bool(rng.integers(2)), spacing_m)
            if not poses:
                raise ConfigurationError(f"road at {road.offset:.1f} m has no pose whose footprint fits the city")
            if frames and len(poses) > frames:
                start = int(rng.integers(len(poses) - frames + 1))
                poses = poses[start:start + frames]
            route = (road, poses)
        road, poses = route
        trips.append(TripPlan(f"vehicle-{i}", list(poses), condition, int(trip_seeds[i]), road))

    logger.debug(f"planned {count} trips seed={seed} repeat={repeat} frames={[len(t) for t in trips]}")
    return trips
