import json
from pathlib import Path

from apps.cli.base import NmpCommand
from apps.common.exceptions import StoreIOError
from apps.simulator.render import decode_tile, render
from apps.simulator.sensor import embedding_matrix
from apps.tile_store.codec import describe, load_tile


class Command(NmpCommand):
    help = "Print the header fields of a tile file."
    report_name = "inspect-tile"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("path")
        parser.add_argument("--render", default=None, help="Also decode the tile into a PNG.")

    def run(self, **options):
        path = Path(options["path"])
        try:
            data = path.read_bytes()
        except OSError as e:
            raise StoreIOError(f"cannot read tile {path}: {e}")
        info = describe(data)
        if options["render"]:
            tile = load_tile(data)
            render(decode_tile(tile, embedding_matrix(tile.channels)), options["render"])
        self.stdout.write(json.dumps({"path": str(path), **info}, indent=2, sort_keys=True))
