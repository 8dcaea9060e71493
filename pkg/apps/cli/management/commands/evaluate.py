from apps.cli.base import NmpCommand
from apps.fusion.services import STRATEGIES
from apps.simulator.experiments import EXPERIMENTS, run_experiment

DEFAULT_SEEDS = 20


class Command(NmpCommand):
    help = "Run a seeded experiment sweep and report how often the expected ordering held."
    report_name = "evaluate"
    config_flags = {
        "extent_m": "city.extent_m",
        "channels": "grid.channels",
        "strategy": "fusion.strategy",
        "alpha": "fusion.alpha",
        "weights": "fusion.weights",
        "condition": "trips.condition",
        "bev_preset": "eval.bev_preset",
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--experiment", choices=sorted(EXPERIMENTS), default="prior-gain")
        parser.add_argument("--seeds", type=int, default=DEFAULT_SEEDS, help="Number of seeds in the sweep.")
        parser.add_argument("--extent-m", type=float, default=None)
        parser.add_argument("--channels", type=int, default=None)
        parser.add_argument("--strategy", choices=STRATEGIES[1:], default=None)
        parser.add_argument("--alpha", type=float, default=None)
        parser.add_argument("--weights", default=None)
        parser.add_argument("--condition", default=None)
        parser.add_argument("--bev-preset", default=None)
        parser.add_argument("--min-fraction", type=float, default=None,
                            help="Exit with status 2 when the ordering holds on fewer seeds.")
        parser.add_argument("--report", default=None)

    def run(self, **options):
        if options["seeds"] < 1:
            self.fail(f"--seeds must be >= 1, got {options['seeds']}")
        config = self.load_config(options)
        first = options["seed"] or 0
        seeds = range(first, first + options["seeds"])
        result = run_experiment(options["experiment"], config, seeds)
        self.emit(result.as_dict(), config, options["report"])
        if options["min_fraction"] is not None and result.fraction < options["min_fraction"]:
            self.fail(f"{options['experiment']}: ordering held on {result.fraction:.0%} of seeds, "
                      f"required {options['min_fraction']:.0%}")
