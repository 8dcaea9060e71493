import logging
from pathlib import Path

from apps.cli.base import NmpCommand
from apps.fusion.services import STRATEGIES
from apps.common.exceptions import FleetRunError
from apps.simulator.reports import build_report, write_report
from apps.simulator.render import render
from apps.simulator.scenario import build_city, make_store, resolve_weights, simulate
from apps.tile_service.sync import VehicleTileSync

logger = logging.getLogger(__name__)


class Command(NmpCommand):
    help = "Drive simulated trips through the prior store and report per-trip mIoU."
    report_name = "simulate"
    config_flags = {
        "city_seed": "city.seed",
        "extent_m": "city.extent_m",
        "resolution_m": "grid.resolution_m",
        "map_resolution_m": "grid.map_resolution_m",
        "channels": "grid.channels",
        "tile_edge": "grid.tile_edge",
        "strategy": "fusion.strategy",
        "alpha": "fusion.alpha",
        "weights": "fusion.weights",
        "weight_seed": "fusion.weight_seed",
        "use_pe": "fusion.use_pe",
        "trips": "trips.count",
        "condition": "trips.condition",
        "mode": "trips.mode",
        "spacing_m": "trips.spacing_m",
        "repeat": "trips.repeat",
        "frames": "trips.frames",
        "addr": "service.addr",
        "store_dir": "store.dir",
        "capacity": "store.capacity",
        "bev_preset": "eval.bev_preset",
        "render_dir": "eval.render_dir",
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--city-seed", type=int, default=None)
        parser.add_argument("--extent-m", type=float, default=None)
        parser.add_argument("--resolution-m", type=float, default=None)
        parser.add_argument("--map-resolution-m", type=float, default=None)
        parser.add_argument("--channels", type=int, default=None)
        parser.add_argument("--tile-edge", type=int, default=None)
        parser.add_argument("--strategy", choices=STRATEGIES, default=None)
        parser.add_argument("--alpha", type=float, default=None)
        parser.add_argument("--weights", default=None, help="NMPW checkpoint for the learned strategies.")
        parser.add_argument("--weight-seed", type=int, default=None)
        parser.add_argument("--no-pe", dest="use_pe", action="store_const", const=False, default=None)
        parser.add_argument("--trips", type=int, default=None)
        parser.add_argument("--condition", default=None)
        parser.add_argument("--mode", choices=["inter", "intra"], default=None)
        parser.add_argument("--spacing-m", type=float, default=None)
        parser.add_argument("--repeat", action="store_const", const=True, default=None)
        parser.add_argument("--frames", type=int, default=None)
        parser.add_argument("--addr", default=None)
        parser.add_argument("--store-dir", default=None)
        parser.add_argument("--capacity", type=int, default=None)
        parser.add_argument("--bev-preset", default=None)
        parser.add_argument("--render-dir", default=None)
        parser.add_argument("--remote", action="store_true", help="Sync tiles through the tile service at --addr.")
        parser.add_argument("--report", default=None, help="Write the JSON report here instead of stdout.")

    def run(self, **options):
        extra = {"trips.seed": options["seed"]} if options["seed"] is not None else {}
        config = self.load_config(options, extra)
        spec = config.grid_spec()
        city = build_city(config, spec)
        weights = resolve_weights(config, spec)

        if options["remote"]:
            store = VehicleTileSync(spec, config["service.addr"], client_id=f"simulate-{config['trips.seed']}")
        else:
            store = make_store(config, spec)
        try:
            result = simulate(config, store=store, city=city, weights=weights)
        except FleetRunError as e:
            if options["report"]:
                write_report(build_report(self.report_name, e.partial_report or {}, config.as_dict()), options["report"])
                logger.error(f"partial report written to {options['report']}")
            raise
        finally:
            if options["remote"]:
                store.close()
            else:
                store.flush()

        if config["eval.render_dir"] and result.last_prediction is not None:
            out = Path(config["eval.render_dir"])
            render(result.last_prediction, out / "prediction.png")
            if result.last_gate is not None:
                render(result.last_gate, out / "gate.png")
        self.emit(result.as_dict(), config, options["report"])
