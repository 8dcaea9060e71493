"""
Wiring from a RunConfig to the objects a fleet run needs.
"""
import logging
from dataclasses import replace
from typing import Optional

from apps.common.exceptions import ConfigurationError
from apps.fusion.checkpoint import load_weights
from apps.fusion.services import ATTENTION_STRATEGIES
from apps.fusion.weights import FusionWeights
from apps.geometry.grid import GridSpec
from apps.tile_store.store import TileStore
from .city import CityMap, generate_city
from .conditions import Condition
from .config import RunConfig
from .fleet import RunReport, run_fleet
from .trips import TripPlan, plan_trips

logger = logging.getLogger(__name__)


def build_city(config: RunConfig, spec: GridSpec) -> CityMap:
    return generate_city(config["city.seed"], config["city.extent_m"], spec.resolution)


def resolve_weights(config: RunConfig, spec: GridSpec, strategy: Optional[str] = None) -> Optional[FusionWeights]:
    """Checkpoint from fusion.weights if set, seeded weights otherwise; None for strategies without weights."""
    strategy = strategy or config["fusion.strategy"]
    if strategy in ("none", "ma"):
        return None
    seed = config["fusion.weight_seed"]
    path = config["fusion.weights"]
    needs_attention = strategy in ATTENTION_STRATEGIES or strategy == "gru_pe"
    if not path:
        return FusionWeights.initialize(spec, seed, with_attention=needs_attention)

    weights = load_weights(path)
    if weights.gru.channels != spec.channels:
        raise ConfigurationError(f"checkpoint {path} has {weights.gru.channels} channels, run uses {spec.channels}")
    if needs_attention:
        weights = with_seeded_attention(weights, spec, seed)
    return weights


def with_seeded_attention(weights: FusionWeights, spec: GridSpec, seed: int) -> FusionWeights:
    """Fill the attention and embedding blocks a GRU-only checkpoint lacks."""
    if weights.attention is not None and weights.pe is not None:
        return weights
    seeded = FusionWeights.initialize(spec, seed)
    return replace(
        weights,
        attention=seeded.attention if weights.attention is None else weights.attention,
        pe=seeded.pe if weights.pe is None else weights.pe,
    )


def make_store(config: RunConfig, spec: GridSpec, persistent: bool = True) -> TileStore:
    directory = config["store.dir"] if persistent else None
    return TileStore(spec, directory=directory, capacity=config["store.capacity"])


def plan(config: RunConfig, city: CityMap, spec: GridSpec, condition: Optional[Condition] = None,
         count: Optional[int] = None):
    return plan_trips(
        city,
        spec,
        config["trips.count"] if count is None else count,
        condition or config.condition(),
        config["trips.seed"],
        spacing_m=config["trips.spacing_m"],
        repeat=config["trips.repeat"],
        frames=config["trips.frames"] or None,
    )


def simulate(config: RunConfig, store=None, city: Optional[CityMap] = None, strategy: Optional[str] = None,
             weights: Optional[FusionWeights] = None, condition: Optional[Condition] = None,
             trips: Optional[list] = None) -> RunReport:
    """One fleet run as described by `config`; any argument given replaces the config-derived object."""
    spec = store.spec if store is not None else config.grid_spec()
    strategy = strategy or config["fusion.strategy"]
    city = city or build_city(config, spec)
    if weights is None:
        weights = resolve_weights(config, spec, strategy)
    if store is None:
        store = make_store(config, spec, persistent=False)
    trips = trips if trips is not None else plan(config, city, spec, condition)
    return run_fleet(
        city, trips, strategy, weights, store,
        alpha=config["fusion.alpha"],
        mode=config["trips.mode"],
        use_pe=config["fusion.use_pe"],
    )


def with_condition(trip: TripPlan, condition: Condition) -> TripPlan:
    return replace(trip, condition=condition)
