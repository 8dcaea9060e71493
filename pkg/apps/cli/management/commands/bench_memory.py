import logging

import numpy as np

from apps.cli.base import NmpCommand
from apps.fusion.services import STRATEGIES
from apps.simulator.fleet import run_fleet
from apps.simulator.scenario import build_city, make_store, resolve_weights
from apps.simulator.trips import TripPlan, route_poses

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.35
ROUTES = ((True, 2), (False, 1))  # (horizontal, road count)


class Command(NmpCommand):
    help = "Drive distinct roads of a city and report sparse against dense tile memory."
    report_name = "bench-memory"
    config_flags = {
        "city_seed": "city.seed",
        "extent_m": "city.extent_m",
        "channels": "grid.channels",
        "tile_edge": "grid.tile_edge",
        "bev_preset": "eval.bev_preset",
        "strategy": "fusion.strategy",
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--city-seed", type=int, default=None)
        parser.add_argument("--extent-m", type=float, default=None)
        parser.add_argument("--channels", type=int, default=None)
        parser.add_argument("--tile-edge", type=int, default=None)
        parser.add_argument("--bev-preset", default=None)
        parser.add_argument("--strategy", choices=STRATEGIES, default=None)
        parser.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
        parser.add_argument("--report", default=None)

    def run(self, **options):
        config = self.load_config(options)
        spec = config.grid_spec()
        city = build_city(config, spec)
        rng = np.random.default_rng(config["trips.seed"] if options["seed"] is None else options["seed"])

        trips = []
        for horizontal, count in ROUTES:
            roads = [r for r in city.roads if r.horizontal == horizontal]
            picks = rng.choice(len(roads), size=min(count, len(roads)), replace=False)
            for index in sorted(int(i) for i in picks):
                poses = route_poses(city, spec, roads[index], True, config["trips.spacing_m"])
                seed = int(rng.integers(2**31 - 1))
                trips.append(TripPlan(f"bench-{len(trips)}", poses, config.condition(), seed, roads[index]))

        strategy = config["fusion.strategy"]
        store = make_store(config, spec, persistent=False)
        run_fleet(city, trips, strategy, resolve_weights(config, spec, strategy), store, alpha=config["fusion.alpha"])
        stats = store.memory_stats()
        logger.info(f"{stats.tile_count} tiles, sparse/dense ratio {stats.ratio:.3f}")

        body = {**stats.as_dict(), "ratio": round(stats.ratio, 6), "threshold": options["threshold"],
                "trips": len(trips), "frames": sum(len(t) for t in trips)}
        self.emit(body, config, options["report"])
        if stats.ratio > options["threshold"]:
            self.fail(f"sparse/dense ratio {stats.ratio:.3f} exceeds {options['threshold']:g}")
