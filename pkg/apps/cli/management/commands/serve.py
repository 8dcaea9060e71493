import logging
import time

from apps.cli.base import NmpCommand
from apps.tile_service.server import serve
from apps.tile_store.store import TileStore

logger = logging.getLogger(__name__)


class Command(NmpCommand):
    help = "Serve the shared tile store until interrupted."
    report_name = "serve"
    config_flags = {
        "addr": "service.addr",
        "store_dir": "store.dir",
        "capacity": "store.capacity",
        "resolution_m": "grid.resolution_m",
        "channels": "grid.channels",
        "tile_edge": "grid.tile_edge",
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--addr", default=None, help="host:port; port 0 picks a free one.")
        parser.add_argument("--store-dir", default=None)
        parser.add_argument("--capacity", type=int, default=None)
        parser.add_argument("--resolution-m", type=float, default=None)
        parser.add_argument("--channels", type=int, default=None)
        parser.add_argument("--tile-edge", type=int, default=None)
        parser.add_argument("--duration", type=float, default=None, help="Stop after this many seconds.")

    def run(self, **options):
        config = self.load_config(options)
        spec = config.grid_spec()
        store = TileStore(spec, directory=config["store.dir"], capacity=config["store.capacity"])
        handle = serve(store, config["service.addr"])
        self.stdout.write(handle.url)
        try:
            if options["duration"] is not None:
                time.sleep(max(0.0, options["duration"]))
            else:
                handle.wait()
        except KeyboardInterrupt:
            logger.info("interrupted")
        finally:
            handle.shutdown()
