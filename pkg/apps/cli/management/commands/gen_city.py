from apps.cli.base import NmpCommand
from apps.simulator.city import generate_city
from apps.simulator.render import render


class Command(NmpCommand):
    help = "Generate a synthetic city and print its summary."
    report_name = "gen-city"
    config_flags = {
        "city_seed": "city.seed",
        "extent_m": "city.extent_m",
        "resolution_m": "grid.resolution_m",
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--city-seed", type=int, default=None)
        parser.add_argument("--extent-m", type=float, default=None)
        parser.add_argument("--resolution-m", type=float, default=None)
        parser.add_argument("--out", default=None, help="Write the ground truth as a PNG.")
        parser.add_argument("--report", default=None)

    def run(self, **options):
        extra = {}
        if options["seed"] is not None and options["city_seed"] is None:
            extra["city.seed"] = options["seed"]
        config = self.load_config(options, extra)
        city = generate_city(config["city.seed"], config["city.extent_m"], config["grid.resolution_m"])
        if options["out"]:
            render(city.north_up(), options["out"])
        body = {
            "seed": city.seed,
            "extent_m": list(city.extent),
            "resolution_m": city.resolution,
            "cells": list(city.cells),
            "roads": [
                {"horizontal": r.horizontal, "offset_m": round(r.offset, 6), "width_m": round(r.width, 6)}
                for r in city.roads
            ],
            "road_fraction": round(city.road_fraction, 6),
            "class_fractions": {k: round(float(v), 6) for k, v in city.ground_truth.class_fractions().items()},
        }
        self.emit(body, config, options["report"])
