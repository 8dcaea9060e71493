from apps.cli.base import NmpCommand
from apps.fusion.checkpoint import save_weights
from apps.fusion.weights import FusionWeights
from apps.gradcheck.trainer import DEFAULT_LEARNING_RATE, DEFAULT_SEED, DEFAULT_STEPS, train_gru, write_loss_csv
from apps.simulator.sensor import embedding_matrix


class Command(NmpCommand):
    help = "Fit the conv-GRU weights by SGD on synthetic traversal pairs."
    report_name = "train-gru"
    config_flags = {
        "city_seed": "city.seed",
        "extent_m": "city.extent_m",
        "channels": "grid.channels",
        "tile_edge": "grid.tile_edge",
        "condition": "trips.condition",
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--steps", type=int, default=DEFAULT_STEPS)
        parser.add_argument("--learning-rate", type=float, default=DEFAULT_LEARNING_RATE)
        parser.add_argument("--city-seed", type=int, default=None)
        parser.add_argument("--extent-m", type=float, default=None)
        parser.add_argument("--channels", type=int, default=None)
        parser.add_argument("--tile-edge", type=int, default=None)
        parser.add_argument("--condition", default=None)
        parser.add_argument("--out", default=None, help="Write the trained weights as an NMPW checkpoint.")
        parser.add_argument("--loss-csv", default=None)
        parser.add_argument("--report", default=None)

    def run(self, **options):
        config = self.load_config(options)
        seed = DEFAULT_SEED if options["seed"] is None else options["seed"]
        result = train_gru(config, epochs=options["steps"], learning_rate=options["learning_rate"], seed=seed)
        if options["out"]:
            save_weights(FusionWeights(result.weights, embedding=embedding_matrix(config["grid.channels"])),
                         options["out"])
        if options["loss_csv"]:
            write_loss_csv(result.history, options["loss_csv"])
        body = {
            "steps": options["steps"],
            "learning_rate": options["learning_rate"],
            "seed": seed,
            "initial_held_out_mse": round(result.initial_held_out_mse, 9),
            "held_out_mse": round(result.held_out_mse, 9),
            "ma_baseline_mse": round(result.baseline_mse, 9),
            "final_train_mse": round(result.history[-1].mse, 9) if result.history else None,
            "checkpoint": options["out"],
        }
        self.emit(body, config, options["report"])
