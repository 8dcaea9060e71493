import math
from pathlib import Path

from apps.cli.base import NmpCommand
from apps.common.exceptions import StoreIOError
from apps.geometry.pose import EgoPose
from apps.simulator.render import decode_tile, render
from apps.simulator.scenario import build_city
from apps.simulator.sensor import decode, embedding_matrix, observe
from apps.tile_store.codec import load_tile


def _pose(text: str) -> EgoPose:
    x, y, yaw = (float(p) for p in text.split(","))
    if not all(math.isfinite(v) for v in (x, y, yaw)):
        raise ValueError(text)
    return EgoPose(x, y, yaw)


class Command(NmpCommand):
    help = "Render a tile, a city's ground truth, or one decoded observation as a PNG."
    report_name = "render"
    config_flags = {
        "city_seed": "city.seed",
        "extent_m": "city.extent_m",
        "channels": "grid.channels",
        "condition": "trips.condition",
        "bev_preset": "eval.bev_preset",
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument("--tile", default=None, help="Decode a tile file.")
        source.add_argument("--city", action="store_true", help="Ground truth of the configured city.")
        source.add_argument("--frame", type=_pose, default=None, help="x,y,yaw of one observation to decode.")
        parser.add_argument("--city-seed", type=int, default=None)
        parser.add_argument("--extent-m", type=float, default=None)
        parser.add_argument("--channels", type=int, default=None)
        parser.add_argument("--condition", default=None)
        parser.add_argument("--bev-preset", default=None)
        parser.add_argument("--scale", type=int, default=1)
        parser.add_argument("--out", required=True)

    def run(self, **options):
        if options["scale"] < 1:
            self.fail(f"--scale must be >= 1, got {options['scale']}")
        if options["tile"]:
            try:
                tile = load_tile(Path(options["tile"]).read_bytes())
            except OSError as e:
                raise StoreIOError(f"cannot read tile {options['tile']}: {e}")
            target = decode_tile(tile, embedding_matrix(tile.channels))
        else:
            config = self.load_config(options)
            spec = config.grid_spec()
            city = build_city(config, spec)
            if options["city"]:
                target = city.north_up()
            else:
                embedding = embedding_matrix(spec.channels)
                seed = options["seed"] or 0
                target = decode(observe(city, options["frame"], config.condition(), seed, spec, embedding), embedding)
        path = render(target, options["out"], scale=options["scale"])
        self.stdout.write(str(path))
