"""
The fleet loop: per frame query the prior, fuse, decode, score and write back.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from apps.common.exceptions import ConfigurationError, FleetRunError, NmpError
from apps.fusion.services import STRATEGIES, fuse
from apps.fusion.weights import FusionWeights
from apps.geometry.grid import local_grid_coords
from apps.tensor_core.feature_map import FeatureMap
from .city import CityMap
from .semantic import IoUAccumulator, SemanticMap
from .sensor import decode, embedding_matrix, observe
from .trips import TripPlan

logger = logging.getLogger(__name__)

MODES = ("inter", "intra")


@dataclass
class GateStats:
    """Sums of the per-cell update gate, split by prior coverage."""

    covered_sum: float = 0.0
    covered_cells: int = 0
    uncovered_sum: float = 0.0
    uncovered_cells: int = 0

    def add(self, gate: np.ndarray, coverage: np.ndarray) -> None:
        self.covered_sum += float(gate[coverage].sum())
        self.covered_cells += int(coverage.sum())
        self.uncovered_sum += float(gate[~coverage].sum())
        self.uncovered_cells += int((~coverage).sum())

    @property
    def covered_mean(self) -> Optional[float]:
        return self.covered_sum / self.covered_cells if self.covered_cells else None

    @property
    def uncovered_mean(self) -> Optional[float]:
        return self.uncovered_sum / self.uncovered_cells if self.uncovered_cells else None

    def as_dict(self) -> dict:
        return {"covered": _rounded(self.covered_mean), "uncovered": _rounded(self.uncovered_mean)}


def _rounded(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(float(value), 6)


@dataclass
class TripReport:
    vehicle_id: str
    condition: str
    frames: int = 0
    frame_miou: List[Optional[float]] = field(default_factory=list)
    iou: IoUAccumulator = field(default_factory=IoUAccumulator)
    gate: GateStats = field(default_factory=GateStats)

    @property
    def miou(self) -> Optional[float]:
        return self.iou.result().mean

    def as_dict(self) -> dict:
        result = self.iou.result()
        return {
            "vehicle_id": self.vehicle_id,
            "condition": self.condition,
            "frames": self.frames,
            "miou": _rounded(result.mean),
            "per_class": {k: _rounded(v) for k, v in result.per_class.items()},
            "frame_miou": [_rounded(v) for v in self.frame_miou],
            "gate": self.gate.as_dict(),
        }


@dataclass
class RunReport:
    strategy: str
    mode: str
    trips: List[TripReport] = field(default_factory=list)
    memory: Optional[dict] = None
    last_prediction: Optional[SemanticMap] = field(default=None, repr=False)
    last_gate: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def miou(self) -> Optional[float]:
        """Mean of the per-trip mIoU values that are defined."""
        values = [t.miou for t in self.trips if t.miou is not None]
        return float(np.mean(values)) if values else None

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "mode": self.mode,
            "miou": _rounded(self.miou),
            "trips": [t.as_dict() for t in self.trips],
            "memory": self.memory,
        }


def _end_trip(store, mode: str) -> None:
    finish = getattr(store, "finish", None)
    if finish is not None:
        finish()
    if mode == "intra":
        store.reset()


def run_fleet(city: CityMap, trips: Sequence[TripPlan], strategy: str, weights: Optional[FusionWeights],
              store, alpha: Optional[float] = None, mode: str = "inter", use_pe: bool = True,
              embedding: Optional[np.ndarray] = None) -> RunReport:
    """
    Drive every trip in order against `store` (a TileStore or a VehicleTileSync).

    In intra mode the store is cleared after each trip so a trip only sees
    its own earlier frames; in inter mode the prior persists.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown fusion strategy '{strategy}', expected one of {STRATEGIES}")
    if mode not in MODES:
        raise ConfigurationError(f"unknown trip mode '{mode}', expected one of {MODES}")
    if mode == "intra" and hasattr(store, "finish"):
        raise ConfigurationError("intra-trip mode needs a local store; remote priors are shared across trips")

    spec = store.spec
    if embedding is None:
        embedding = weights.embedding if weights is not None and weights.embedding is not None \
            else embedding_matrix(spec.channels)

    report = RunReport(strategy, mode)
    for trip in trips:
        trip_report = TripReport(trip.vehicle_id, trip.condition.name)
        report.trips.append(trip_report)
        for index, pose in enumerate(trip.poses):
            try:
                current = observe(city, pose, trip.condition, trip.frame_seed(index), spec, embedding)
                if strategy == "none":
                    prior = FeatureMap.zeros(spec.bev_rows, spec.bev_cols, spec.channels, covered=False)
                else:
                    prior = store.query_region(pose)
                fused = fuse(strategy, current, prior, weights, alpha, use_pe)
                prediction = decode(fused.refined, embedding)
                gt = SemanticMap(city.labels_at(local_grid_coords(spec, pose)))
                store.write_back(pose, fused.new_prior)
            except NmpError as e:
                logger.error(f"{trip.vehicle_id} frame {index} failed: {e}")
                raise FleetRunError(f"{trip.vehicle_id} frame {index} failed: {e}", report.as_dict()) from e

            frame_iou = trip_report.iou.add(prediction, gt)
            trip_report.frame_miou.append(frame_iou.mean)
            trip_report.frames += 1
            if fused.gate is not None:
                trip_report.gate.add(fused.gate, prior.coverage)
                report.last_gate = fused.gate
            report.last_prediction = prediction

        logger.info(f"{trip.vehicle_id}: {trip_report.frames} frames, mIoU {trip_report.miou}")
        try:
            _end_trip(store, mode)
        except NmpError as e:
            raise FleetRunError(f"{trip.vehicle_id} could not close its trip: {e}", report.as_dict()) from e

    stats = getattr(store, "memory_stats", None)
    if stats is not None and mode == "inter":
        report.memory = stats().as_dict()
    return report
