import json
import os
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.test import SimpleTestCase

from apps.fusion.checkpoint import load_weights
from apps.simulator.config import load_run_config
from apps.tile_service.server import serve
from apps.tile_store.codec import save_tile
from apps.tile_store.keys import TileKey
from apps.tile_store.store import TileStore
from apps.tile_store.tile import MapTile
from .entry import COMMANDS, main

SMALL_CONFIG = """\
city.seed = 5
city.extent_m = 200
grid.channels = 8
grid.tile_edge = 32
eval.bev_preset = test
trips.count = 2
trips.spacing_m = 3
trips.frames = 4
trips.repeat = true
"""


class CliTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.config = self.dir / "small.cfg"
        self.config.write_text(SMALL_CONFIG)

    def tearDown(self):
        self.tmp.cleanup()

    def call(self, *argv):
        out, err = StringIO(), StringIO()
        code = main(list(argv), stdout=out, stderr=err)
        return code, out.getvalue(), err.getvalue()


class EntryTests(CliTestCase):
    def test_unknown_command_is_usage_error(self):
        code, _, err = self.call("fly")
        self.assertEqual(code, 1)
        self.assertIn("usage", err)

    def test_no_command(self):
        self.assertEqual(self.call()[0], 1)

    def test_unknown_flag_rejected(self):
        code, _, err = self.call("gen-city", "--no-such-flag")
        self.assertEqual(code, 1)
        self.assertIn("unrecognized arguments", err)

    def test_help_exits_zero(self):
        self.assertEqual(self.call("simulate", "--help")[0], 0)

    def test_every_command_takes_seed_and_config(self):
        for name in COMMANDS:
            code, _, _ = self.call(name, "--help")
            self.assertEqual(code, 0, name)

    def test_bad_config_value_is_runtime_error(self):
        self.config.write_text("trips.count = many\n")
        code, _, err = self.call("simulate", "--config", str(self.config))
        self.assertEqual(code, 2)
        self.assertIn("trips.count", err)

    def test_unknown_config_key(self):
        self.config.write_text("fusion.colour = red\n")
        self.assertEqual(self.call("simulate", "--config", str(self.config))[0], 2)


class GenCityTests(CliTestCase):
    def test_summary_and_png(self):
        png = self.dir / "city.png"
        code, out, _ = self.call("gen-city", "--seed", "3", "--extent-m", "100", "--out", str(png))
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertEqual(report["header"]["command"], "gen-city")
        self.assertEqual(report["seed"], 3)
        self.assertEqual(report["cells"], [333, 333])
        self.assertAlmostEqual(sum(report["class_fractions"].values()), 1.0, places=5)
        self.assertTrue(png.is_file())

    def test_tiny_extent_fails(self):
        self.assertEqual(self.call("gen-city", "--extent-m", "5")[0], 2)


class SimulateTests(CliTestCase):
    def test_baseline_report(self):
        code, out, _ = self.call("simulate", "--config", str(self.config), "--strategy", "none")
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertEqual(report["strategy"], "none")
        self.assertEqual(len(report["trips"]), 2)
        self.assertEqual(report["config"]["fusion.strategy"], "none")

    def test_reports_are_byte_identical(self):
        paths = [self.dir / "a.json", self.dir / "b.json"]
        with mock.patch.dict(os.environ, {"SOURCE_DATE_EPOCH": "1700000000"}):
            for path in paths:
                code, _, _ = self.call("simulate", "--config", str(self.config), "--report", str(path))
                self.assertEqual(code, 0)
        self.assertEqual(paths[0].read_bytes(), paths[1].read_bytes())

    def test_flags_override_file(self):
        code, out, _ = self.call("simulate", "--config", str(self.config), "--trips", "1", "--mode", "intra")
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertEqual(report["mode"], "intra")
        self.assertEqual(len(report["trips"]), 1)

    def test_render_dir(self):
        render_dir = self.dir / "frames"
        code, _, _ = self.call("simulate", "--config", str(self.config), "--strategy", "gru",
                               "--render-dir", str(render_dir))
        self.assertEqual(code, 0)
        self.assertTrue((render_dir / "prediction.png").is_file())
        self.assertTrue((render_dir / "gate.png").is_file())

    def test_persistent_store_dir(self):
        store_dir = self.dir / "tiles"
        code, _, _ = self.call("simulate", "--config", str(self.config), "--store-dir", str(store_dir))
        self.assertEqual(code, 0)
        self.assertTrue(any(store_dir.iterdir()))

    def test_remote_store(self):
        spec = load_run_config(self.config).grid_spec()
        store = TileStore(spec)
        server = serve(store, "127.0.0.1:0")
        try:
            code, out, err = self.call("simulate", "--config", str(self.config), "--remote", "--addr", server.address)
        finally:
            server.shutdown()
        self.assertEqual(code, 0, err)
        self.assertGreater(len(store.keys()), 0)
        self.assertEqual(len(json.loads(out)["trips"]), 2)

    def test_unreachable_service(self):
        code, _, _ = self.call("simulate", "--config", str(self.config), "--remote", "--addr", "127.0.0.1:1")
        self.assertEqual(code, 2)

    def test_corrupt_checkpoint(self):
        bad = self.dir / "bad.nmpw"
        bad.write_bytes(b"NMPW\x01\x00\x01\x00\x02\x00\xff\xfe")
        code, _, err = self.call("simulate", "--config", str(self.config), "--strategy", "gru",
                                 "--weights", str(bad))
        self.assertEqual(code, 2)
        self.assertIn("UTF-8", err)

    def test_attention_only_strategy(self):
        code, out, _ = self.call("simulate", "--config", str(self.config), "--strategy", "ca")
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["strategy"], "ca")


class EvaluateTests(CliTestCase):
    def test_single_seed_sweep(self):
        code, out, _ = self.call("evaluate", "--config", str(self.config), "--experiment", "intra-inter",
                                 "--seeds", "1")
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertEqual(report["experiment"], "intra-inter")
        self.assertEqual(len(report["rows"]), 1)

    def test_min_fraction_gate(self):
        code, _, err = self.call("evaluate", "--config", str(self.config), "--experiment", "intra-inter",
                                 "--seeds", "1", "--min-fraction", "1.01")
        self.assertEqual(code, 2)
        self.assertIn("ordering held", err)

    def test_unknown_experiment(self):
        self.assertEqual(self.call("evaluate", "--experiment", "nope")[0], 1)


class TrainGruTests(CliTestCase):
    def test_checkpoint_and_loss_csv(self):
        checkpoint, csv_path = self.dir / "gru.nmpw", self.dir / "loss.csv"
        code, out, _ = self.call("train-gru", "--config", str(self.config), "--steps", "2",
                                 "--out", str(checkpoint), "--loss-csv", str(csv_path))
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertEqual(report["steps"], 2)
        weights = load_weights(checkpoint)
        self.assertEqual(weights.gru.channels, 8)
        self.assertEqual(weights.embedding.shape, (4, 8))
        self.assertEqual(len(csv_path.read_text().splitlines()), 3)

    def test_negative_learning_rate(self):
        code, _, _ = self.call("train-gru", "--config", str(self.config), "--steps", "1",
                               "--learning-rate", "-1")
        self.assertEqual(code, 2)


class GradcheckTests(CliTestCase):
    def test_passes_tolerance(self):
        code, out, _ = self.call("gradcheck", "--seeds", "2")
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertLessEqual(report["max_relative_error"], 1e-4)
        self.assertIn("w_z", report["per_block"])

    def test_zero_tolerance_fails(self):
        code, _, err = self.call("gradcheck", "--seeds", "1", "--tolerance", "0")
        self.assertEqual(code, 2)
        self.assertIn("exceeds", err)

    def test_bad_shape(self):
        self.assertEqual(self.call("gradcheck", "--shape", "6,6")[0], 1)


class InspectTileTests(CliTestCase):
    def test_header_fields(self):
        tile = MapTile.empty(TileKey(3, -2), 16, 4)
        tile.weight[:2, :5] = 1.0
        tile.features[:2, :5] = 0.5
        tile.version = 4
        path = self.dir / "tile.nmpt"
        path.write_bytes(save_tile(tile))
        png = self.dir / "tile.png"
        code, out, _ = self.call("inspect-tile", str(path), "--render", str(png))
        self.assertEqual(code, 0)
        info = json.loads(out)
        self.assertEqual(info["key"], [3, -2])
        self.assertEqual(info["written_cells"], 10)
        self.assertEqual(info["version"], 4)
        self.assertTrue(png.is_file())

    def test_missing_file(self):
        self.assertEqual(self.call("inspect-tile", str(self.dir / "absent.nmpt"))[0], 2)

    def test_corrupt_file(self):
        path = self.dir / "junk.nmpt"
        path.write_bytes(b"not a tile")
        self.assertEqual(self.call("inspect-tile", str(path))[0], 2)


class BenchMemoryTests(CliTestCase):
    def test_sparse_ratio_under_threshold(self):
        code, out, _ = self.call("bench-memory", "--config", str(self.config), "--city-seed", "7")
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertGreater(report["ratio"], 0.0)
        self.assertLessEqual(report["ratio"], 0.35)
        self.assertEqual(report["trips"], 3)

    def test_threshold_exceeded(self):
        code, _, _ = self.call("bench-memory", "--config", str(self.config), "--threshold", "0")
        self.assertEqual(code, 2)


class RenderTests(CliTestCase):
    def test_city(self):
        out_png = self.dir / "gt.png"
        code, _, _ = self.call("render", "--city", "--extent-m", "60", "--out", str(out_png))
        self.assertEqual(code, 0)
        self.assertTrue(out_png.is_file())

    def test_frame(self):
        out_png = self.dir / "frame.png"
        code, _, _ = self.call("render", "--config", str(self.config), "--frame", "100,100,0",
                               "--out", str(out_png))
        self.assertEqual(code, 0)
        self.assertTrue(out_png.is_file())

    def test_frame_outside_city(self):
        code, _, _ = self.call("render", "--config", str(self.config), "--frame", "1000,0,0",
                               "--out", str(self.dir / "x.png"))
        self.assertEqual(code, 2)

    def test_source_required(self):
        self.assertEqual(self.call("render", "--out", str(self.dir / "x.png"))[0], 1)


class ServeTests(CliTestCase):
    def test_bounded_run(self):
        code, out, _ = self.call("serve", "--addr", "127.0.0.1:0", "--duration", "0", "--channels", "8")
        self.assertEqual(code, 0)
        self.assertTrue(out.startswith("http://127.0.0.1:"))

    def test_bad_address(self):
        self.assertEqual(self.call("serve", "--addr", "nonsense", "--duration", "0")[0], 2)
