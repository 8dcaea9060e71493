from apps.cli.base import NmpCommand
from apps.gradcheck.finite_difference import DEFAULT_EPS, check_gru_gradients

DEFAULT_TOLERANCE = 1e-4


def _shape(text: str):
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(text)
    return parts


class Command(NmpCommand):
    help = "Compare analytic conv-GRU gradients with central differences."
    report_name = "gradcheck"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--seeds", type=int, default=20)
        parser.add_argument("--shape", type=_shape, default=(6, 6, 4), help="rows,cols,channels")
        parser.add_argument("--eps", type=float, default=DEFAULT_EPS)
        parser.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
        parser.add_argument("--report", default=None)

    def run(self, **options):
        first = options["seed"] or 0
        per_block = {}
        for seed in range(first, first + options["seeds"]):
            for name, error in check_gru_gradients(seed, options["shape"], options["eps"]).items():
                per_block[name] = max(per_block.get(name, 0.0), error)
        worst = max(per_block.values(), default=0.0)
        body = {
            "max_relative_error": worst,
            "per_block": dict(sorted(per_block.items())),
            "seeds": options["seeds"],
            "shape": list(options["shape"]),
            "tolerance": options["tolerance"],
        }
        self.emit(body, path=options["report"])
        if worst > options["tolerance"]:
            self.fail(f"max relative gradient error {worst:.3e} exceeds {options['tolerance']:g}")
