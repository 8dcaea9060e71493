import json
import math
import os
import tempfile
import types
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase
from PIL import Image

from apps.common.exceptions import ConfigurationError, FleetRunError, OutOfExtentError, ShapeError
from apps.fusion.weights import FusionWeights, GruWeights
from apps.gradcheck.trainer import train_gru
from apps.geometry.grid import GridSpec, local_grid_coords
from apps.geometry.pose import EgoPose
from apps.tensor_core.feature_map import FeatureMap
from apps.tile_store.keys import TileKey
from apps.tile_store.store import TileStore
from apps.tile_store.tile import MapTile
from .city import generate_city, single_road_city
from .conditions import CONDITIONS, NOISELESS, Condition, get_condition
from .config import load_run_config
from .experiments import run_experiment
from .fleet import run_fleet
from .render import PALETTE, decode_tile, render
from .reports import build_report, dumps, generated_at
from .scenario import build_city, plan, simulate
from .semantic import BACKGROUND, BOUNDARY, CROSSING, DIVIDER, IoUAccumulator, SemanticMap, evaluate_miou
from .sensor import decode, embedding_matrix, encode, min_class_distance, noise_scale, observe
from .trips import TripPlan, plan_trips

# 60 x 30 BEV cells at 0.3 m, eight channels
SPEC = GridSpec(resolution=0.3, bev_rows=60, bev_cols=30, channels=8, tile_edge=32, patch_size=10)


def small_config(**changes):
    values = {
        "city.extent_m": 200.0,
        "eval.bev_preset": "test",
        "grid.channels": 8,
        "grid.tile_edge": 32,
        "trips.spacing_m": 3.0,
        "trips.frames": 6,
    }
    values.update(changes)
    return load_run_config(overrides=values)


class ConditionTests(SimpleTestCase):
    def test_noise_ordering(self):
        s = {name: c.noise_sigma for name, c in CONDITIONS.items()}
        self.assertLess(s["normal"], s["rain"])
        self.assertLessEqual(s["rain"], s["night"])
        self.assertLess(s["night"], s["night_rain"])

    def test_rate_validation(self):
        with self.assertRaises(ConfigurationError):
            Condition("bad", 0.1, occlusion_rate=1.5)
        with self.assertRaises(ConfigurationError):
            get_condition("fog")


class SemanticTests(SimpleTestCase):
    def test_identical_maps(self):
        labels = np.array([[0, 1, 1], [3, 3, 0]])
        report = evaluate_miou(SemanticMap(labels), SemanticMap(labels))
        self.assertEqual(report.per_class["divider"], 1.0)
        self.assertEqual(report.per_class["boundary"], 1.0)
        self.assertIsNone(report.per_class["crossing"])
        self.assertEqual(report.mean, 1.0)

    def test_disjoint_masks(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        pred = np.zeros((4, 4), dtype=np.uint8)
        gt[0, :2] = DIVIDER
        pred[3, :2] = DIVIDER
        self.assertEqual(evaluate_miou(SemanticMap(pred), SemanticMap(gt)).per_class["divider"], 0.0)

    def test_half_overlap_is_one_third(self):
        gt = np.zeros((2, 8), dtype=np.uint8)
        pred = np.zeros((2, 8), dtype=np.uint8)
        gt[0, 0:4] = CROSSING
        pred[0, 2:6] = CROSSING
        report = evaluate_miou(SemanticMap(pred), SemanticMap(gt))
        self.assertAlmostEqual(report.per_class["crossing"], 1 / 3)
        self.assertAlmostEqual(report.mean, 1 / 3)

    def test_all_background_is_undefined(self):
        empty = SemanticMap.filled(3, 3)
        self.assertIsNone(evaluate_miou(empty, empty).mean)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            evaluate_miou(SemanticMap.filled(2, 2), SemanticMap.filled(2, 3))

    def test_accumulator_sums_frames(self):
        acc = IoUAccumulator()
        gt = np.zeros((1, 4), dtype=np.uint8)
        gt[0, :2] = BOUNDARY
        acc.add(SemanticMap(gt), SemanticMap(gt))
        miss = np.zeros((1, 4), dtype=np.uint8)
        acc.add(SemanticMap(miss), SemanticMap(gt))
        self.assertAlmostEqual(acc.result().per_class["boundary"], 0.5)


class CityTests(SimpleTestCase):
    def test_same_seed_same_raster(self):
        a = generate_city(3, 200.0)
        b = generate_city(3, 200.0)
        np.testing.assert_array_equal(a.ground_truth.labels, b.ground_truth.labels)
        self.assertFalse(np.array_equal(a.ground_truth.labels, generate_city(4, 200.0).ground_truth.labels))

    def test_single_road_layout(self):
        city = single_road_city(width=6.0, extent=60.0, resolution=0.3)
        labels = city.ground_truth.labels
        self.assertEqual(labels.shape, (200, 200))
        middle = 100
        for gy, expected in ((middle - 10, BOUNDARY), (middle, DIVIDER), (middle + 10, BOUNDARY)):
            self.assertTrue((labels[:, gy] == expected).all(), f"row {gy}")
        for gy in (middle - 11, middle - 9, middle - 1, middle + 1, middle + 9, middle + 11):
            self.assertTrue((labels[:, gy] == BACKGROUND).all(), f"row {gy}")
        self.assertEqual(((middle + 10) - (middle - 10)) * 0.3, 6.0)

    def test_default_city_classes_and_road_share(self):
        for seed in range(3):
            city = generate_city(seed, 400.0)
            self.assertTrue(0.05 <= city.road_fraction <= 0.30, city.road_fraction)
            present = set(np.unique(city.ground_truth.labels).tolist())
            self.assertEqual(present, {BACKGROUND, DIVIDER, CROSSING, BOUNDARY})

    def test_degenerate_extent(self):
        with self.assertRaises(ConfigurationError):
            generate_city(1, 10.0)

    def test_out_of_extent_lookup(self):
        city = single_road_city()
        with self.assertRaises(OutOfExtentError):
            city.labels_at(local_grid_coords(SPEC, EgoPose(1.0, 1.0, 0.0)))


class SensorTests(SimpleTestCase):
    def setUp(self):
        self.E = embedding_matrix(SPEC.channels)

    def test_embedding_rows_orthonormal(self):
        np.testing.assert_allclose(self.E @ self.E.T, np.eye(4), atol=1e-6)
        np.testing.assert_array_equal(self.E, embedding_matrix(SPEC.channels))

    def test_too_few_channels(self):
        with self.assertRaises(ConfigurationError):
            embedding_matrix(3)

    def test_decode_inverts_encode(self):
        labels = np.array([[0, 1, 2, 3]])
        decoded = decode(FeatureMap(encode(labels, self.E)), self.E)
        np.testing.assert_array_equal(decoded.labels, labels)

    def test_zero_features_are_background(self):
        decoded = decode(FeatureMap.zeros(3, 3, SPEC.channels), self.E)
        self.assertTrue((decoded.labels == BACKGROUND).all())

    def test_small_noise_does_not_flip_classes(self):
        rng = np.random.default_rng(0)
        radius = 0.9 * min_class_distance(self.E) / 2
        for _ in range(50):
            n = rng.normal(size=SPEC.channels)
            n *= radius / np.linalg.norm(n)
            data = (self.E + n).astype(np.float32)[None]
            np.testing.assert_array_equal(decode(FeatureMap(data), self.E).labels[0], [0, 1, 2, 3])

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            decode(FeatureMap.zeros(2, 2, 6), self.E)

    def test_noiseless_observation_decodes_to_ground_truth(self):
        city = generate_city(5, 200.0)
        trip = plan_trips(city, SPEC, 1, NOISELESS, seed=5, spacing_m=3.0, frames=4)[0]
        for pose in trip.poses:
            decoded = decode(observe(city, pose, NOISELESS, 0, SPEC), self.E)
            np.testing.assert_array_equal(decoded.labels, city.labels_at(local_grid_coords(SPEC, pose)))

    def test_noise_power(self):
        city = generate_city(5, 200.0)
        pose = plan_trips(city, SPEC, 1, NOISELESS, seed=5, spacing_m=3.0)[0].poses[0]
        condition = Condition("gritty", noise_sigma=0.5, range_decay=0.01)
        clean = encode(city.labels_at(local_grid_coords(SPEC, pose)), self.E)
        noisy = observe(city, pose, condition, 11, SPEC).data
        measured = float(np.mean((noisy - clean) ** 2))
        expected = float(np.mean(noise_scale(SPEC, condition) ** 2))
        self.assertLess(abs(measured - expected) / expected, 0.10)

    def test_full_occlusion_decodes_to_background(self):
        city = generate_city(5, 200.0)
        pose = plan_trips(city, SPEC, 1, NOISELESS, seed=5, spacing_m=3.0)[0].poses[0]
        blind = Condition("blind", noise_sigma=0.5, occlusion_rate=1.0)
        decoded = decode(observe(city, pose, blind, 3, SPEC), self.E)
        self.assertTrue((decoded.labels == BACKGROUND).all())

    def test_occlusion_sector_size(self):
        city = generate_city(5, 200.0)
        pose = plan_trips(city, SPEC, 1, NOISELESS, seed=5, spacing_m=3.0)[0].poses[0]
        partial = Condition("partial", noise_sigma=0.0, occlusion_rate=0.25)
        data = observe(city, pose, partial, 3, SPEC).data
        zeroed = int(np.all(data == 0, axis=-1).sum())
        self.assertEqual(zeroed, round(0.25 * SPEC.bev_rows * SPEC.bev_cols))

    def test_observation_is_deterministic(self):
        city = generate_city(5, 200.0)
        pose = plan_trips(city, SPEC, 1, NOISELESS, seed=5, spacing_m=3.0)[0].poses[0]
        a = observe(city, pose, CONDITIONS["rain"], 9, SPEC).data
        b = observe(city, pose, CONDITIONS["rain"], 9, SPEC).data
        np.testing.assert_array_equal(a, b)


class TripTests(SimpleTestCase):
    def setUp(self):
        self.city = generate_city(2, 200.0)

    def test_poses_stay_inside_city_and_overlap(self):
        for trip in plan_trips(self.city, SPEC, 4, NOISELESS, seed=2, spacing_m=3.0):
            self.assertGreater(len(trip), 1)
            for pose in trip.poses:
                self.assertTrue(self.city.contains(local_grid_coords(SPEC, pose)))
                self.assertAlmostEqual(math.remainder(pose.yaw, math.pi / 2), 0.0)
            for a, b in zip(trip.poses, trip.poses[1:]):
                step = math.hypot(b.x - a.x, b.y - a.y)
                self.assertLess(step, SPEC.bev_extent_m[0])
                self.assertAlmostEqual(step, 3.0, places=6)

    def test_repeat_shares_route_not_noise(self):
        trips = plan_trips(self.city, SPEC, 3, NOISELESS, seed=2, spacing_m=3.0, repeat=True, frames=5)
        self.assertEqual(trips[0].poses, trips[2].poses)
        self.assertEqual(len({t.seed for t in trips}), 3)

    def test_spacing_must_be_below_bev_depth(self):
        with self.assertRaises(ConfigurationError):
            plan_trips(self.city, SPEC, 1, NOISELESS, seed=2, spacing_m=20.0)


class FleetTests(SimpleTestCase):
    def setUp(self):
        self.city = generate_city(8, 200.0)

    def trips(self, condition, count=2, seed=8, repeat=True):
        return plan_trips(self.city, SPEC, count, condition, seed, spacing_m=3.0, repeat=repeat, frames=6)

    def test_baseline_is_raw_decode(self):
        trips = self.trips(CONDITIONS["rain"], count=1)
        report = run_fleet(self.city, trips, "none", None, TileStore(SPEC))
        trip = trips[0]
        for index, pose in enumerate(trip.poses):
            raw = decode(observe(self.city, pose, trip.condition, trip.frame_seed(index), SPEC))
            gt = SemanticMap(self.city.labels_at(local_grid_coords(SPEC, pose)))
            self.assertEqual(report.trips[0].frame_miou[index], evaluate_miou(raw, gt).mean)

    def test_noiseless_fixed_point_every_strategy(self):
        weights = FusionWeights.signal_preserving(SPEC)
        for strategy in ("none", "ma", "gru", "gru_pe", "ca", "gru_ca"):
            report = run_fleet(self.city, self.trips(NOISELESS), strategy, weights, TileStore(SPEC))
            for trip in report.trips:
                self.assertEqual(trip.miou, 1.0, strategy)
                self.assertTrue(all(v in (None, 1.0) for v in trip.frame_miou), strategy)

    def test_second_traversal_improves_with_ma(self):
        noisy = CONDITIONS["normal"].with_changes(name="sigma-0.5", noise_sigma=0.5)
        wins = 0
        for seed in range(20):
            city = generate_city(seed, 200.0)
            trips = plan_trips(city, SPEC, 2, noisy, seed, spacing_m=3.0, repeat=True, frames=6)
            report = run_fleet(city, trips, "ma", None, TileStore(SPEC), alpha=0.5)
            wins += report.trips[1].miou >= report.trips[0].miou
        self.assertGreaterEqual(wins, 19)

    def test_inter_trip_beats_intra_trip(self):
        result = run_experiment("intra-inter", small_config(), range(20))
        self.assertGreaterEqual(result.fraction, 0.9)

    def test_baseline_degrades_with_noise(self):
        inversions = 0
        for seed in range(20):
            city = generate_city(seed, 200.0)
            scores = []
            for sigma in (0.2, 0.5, 0.8):
                condition = CONDITIONS["normal"].with_changes(name=f"s{sigma}", noise_sigma=sigma)
                trips = plan_trips(city, SPEC, 1, condition, seed, spacing_m=3.0, frames=6)
                scores.append(run_fleet(city, trips, "none", None, TileStore(SPEC)).miou)
            inversions += sum(b > a for a, b in zip(scores, scores[1:]))
        self.assertLessEqual(inversions, 1)

    def test_failed_frame_reports_partial_run(self):
        trip = self.trips(CONDITIONS["normal"], count=1)[0]
        trip.poses.append(EgoPose(-500.0, -500.0, 0.0))
        with self.assertRaises(FleetRunError) as ctx:
            run_fleet(self.city, [trip], "ma", None, TileStore(SPEC))
        partial = ctx.exception.partial_report
        self.assertEqual(partial["trips"][0]["frames"], len(trip.poses) - 1)

    def test_intra_mode_needs_local_store(self):
        remote = types.SimpleNamespace(spec=SPEC, finish=lambda: 0)
        with self.assertRaises(ConfigurationError):
            run_fleet(self.city, self.trips(NOISELESS), "ma", None, remote, mode="intra")

    def test_intra_mode_clears_prior_between_trips(self):
        store = TileStore(SPEC)
        run_fleet(self.city, self.trips(NOISELESS), "ma", None, store, mode="intra")
        self.assertEqual(store.keys(), [])

    def test_gate_statistics_split_by_coverage(self):
        weights = FusionWeights.initialize(SPEC, seed=7, with_attention=False)
        report = run_fleet(self.city, self.trips(CONDITIONS["normal"]), "gru", weights, TileStore(SPEC))
        first, second = report.trips[0].gate, report.trips[1].gate
        self.assertAlmostEqual(first.uncovered_mean, 1.0)
        self.assertIsNotNone(second.covered_mean)
        self.assertTrue(0.0 < second.covered_mean < 1.0)
        self.assertEqual(report.last_gate.shape, (SPEC.bev_rows, SPEC.bev_cols))

    def test_repeated_runs_are_identical(self):
        def once():
            trips = self.trips(CONDITIONS["night_rain"])
            return dumps(run_fleet(self.city, trips, "ma", None, TileStore(SPEC)).as_dict())

        self.assertEqual(once(), once())


class ExperimentTests(SimpleTestCase):
    def test_ma_beats_baseline(self):
        result = run_experiment("prior-gain", small_config(), range(20))
        self.assertGreaterEqual(result.fraction, 0.95)
        self.assertEqual(set(result.rows[0]), {"seed", "none", "ma"})

    def test_prior_helps_more_in_rain(self):
        result = run_experiment("weather", small_config(), range(20))
        self.assertGreaterEqual(result.fraction, 0.8)

    def test_coarse_map_grid_does_not_help(self):
        result = run_experiment("resolution", small_config(), range(20))
        self.assertLessEqual(result.holds.count(False), 1)
        fine = np.mean([row["0.3"] for row in result.rows])
        coarse = np.mean([row["1.2"] for row in result.rows])
        self.assertGreaterEqual(fine, coarse)

    def test_fusion_rows(self):
        result = run_experiment("fusion", small_config(), [1])
        self.assertEqual(
            list(result.rows[0]),
            ["seed", "none", "ma", "gru", "ca", "gru_pe", "gru_ca_no_pe", "gru_ca"],
        )
        self.assertTrue(all(0.0 <= v <= 1.0 for k, v in result.rows[0].items() if k != "seed"))

    def test_fusion_rows_share_given_weights(self):
        weights = FusionWeights(GruWeights.blend(8))
        seen = []

        def record(config, **kwargs):
            seen.append((kwargs["strategy"], config["fusion.use_pe"], kwargs["weights"]))
            return types.SimpleNamespace(trips=[])

        with mock.patch("apps.simulator.experiments.simulate", side_effect=record):
            run_experiment("fusion", small_config(), [1], weights)
        self.assertEqual(len(seen), 7)
        for strategy, _, w in seen:
            if strategy in ("none", "ma"):
                self.assertIsNone(w)
            else:
                self.assertIs(w.gru, weights.gru)
                self.assertIsNotNone(w.attention)
                self.assertIsNotNone(w.pe)
        self.assertIn(("gru_ca", False), [(s, pe) for s, pe, _ in seen])
        self.assertIn(("ca", False), [(s, pe) for s, pe, _ in seen])

    def test_unknown_experiment(self):
        with self.assertRaises(ConfigurationError):
            run_experiment("table-9", small_config(), [1])


class TrainedFusionTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.weights = FusionWeights(train_gru(small_config()).weights)

    def test_trained_gru_beats_baseline(self):
        result = run_experiment("prior-gain", small_config(), range(20), self.weights)
        wins = sum(row["gru"] > row["none"] for row in result.rows)
        self.assertGreaterEqual(wins, 19)

    def test_gate_is_higher_on_prior_gaps_than_on_mapped_cells(self):
        city = generate_city(8, 200.0)
        full = plan_trips(city, SPEC, 1, CONDITIONS["rain"], 8, spacing_m=3.0, frames=6)[0]
        half = TripPlan("vehicle-a", full.poses[:len(full) // 2], full.condition, full.seed + 1, full.road)
        report = run_fleet(city, [half, full], "gru", self.weights, TileStore(SPEC))
        gate = report.trips[1].gate
        self.assertIsNotNone(gate.covered_mean)
        self.assertGreater(gate.uncovered_mean, gate.covered_mean)


class RenderTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_background_map_is_uniform(self):
        path = render(SemanticMap.filled(10, 20), self.dir / "bg.png")
        pixels = np.array(Image.open(path))
        self.assertEqual(pixels.shape, (10, 20, 3))
        self.assertTrue((pixels == PALETTE[BACKGROUND]).all())

    def test_single_road_render(self):
        city = single_road_city()
        pixels = np.array(Image.open(render(city.north_up(), self.dir / "road.png")))
        ny = city.cells[1]
        np.testing.assert_array_equal(pixels[ny - 1 - 100, 50], PALETTE[DIVIDER])
        np.testing.assert_array_equal(pixels[ny - 1 - 110, 50], PALETTE[BOUNDARY])
        np.testing.assert_array_equal(pixels[ny - 1 - 105, 50], PALETTE[BACKGROUND])

    def test_gate_map_grayscale(self):
        gate = np.array([[0.0, 1.0], [0.5, 2.0]])
        image = Image.open(render(gate, self.dir / "gate.png"))
        self.assertEqual(image.mode, "L")
        np.testing.assert_array_equal(np.array(image), [[0, 255], [128, 255]])

    def test_tile_decodes_through_the_pseudo_inverse(self):
        E = embedding_matrix(SPEC.channels)
        tile = MapTile.empty(TileKey(0, 0), 4, SPEC.channels)
        tile.features[1, 2] = E[DIVIDER]
        tile.weight[1, 2] = 1.0
        labels = decode_tile(tile, E).labels
        self.assertEqual(labels[4 - 1 - 2, 1], DIVIDER)
        self.assertEqual(int((labels != BACKGROUND).sum()), 1)


class RunConfigTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, text):
        path = Path(self.tmp.name) / "run.cfg"
        path.write_text(text)
        return path

    def test_file_then_flags(self):
        path = self.write("city.seed = 11\nfusion.strategy = gru\ntrips.repeat = true\n")
        config = load_run_config(path, {"fusion.strategy": "none", "trips.count": None})
        self.assertEqual(config["city.seed"], 11)
        self.assertEqual(config["fusion.strategy"], "none")
        self.assertTrue(config["trips.repeat"])
        self.assertEqual(config["trips.count"], 3)

    def test_unknown_key(self):
        with self.assertRaises(ConfigurationError):
            load_run_config(self.write("city.colour = red\n"))

    def test_bad_value(self):
        with self.assertRaises(ConfigurationError):
            load_run_config(self.write("grid.channels = many\n"))

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError):
            load_run_config(Path(self.tmp.name) / "absent.cfg")

    def test_env_address_wins_over_file(self):
        path = self.write("service.addr = 10.0.0.1:9000\n")
        with mock.patch.dict(os.environ, {"NMP_ADDR": "127.0.0.1:7001"}):
            self.assertEqual(load_run_config(path)["service.addr"], "127.0.0.1:7001")

    def test_grid_spec_from_preset(self):
        spec = small_config().grid_spec()
        self.assertEqual((spec.bev_rows, spec.bev_cols, spec.channels), (60, 30, 8))

    def test_simulate_from_config(self):
        config = small_config(**{"trips.count": 1})
        report = simulate(config)
        self.assertEqual(report.trips[0].frames, 6)
        spec = config.grid_spec()
        city = build_city(config, spec)
        self.assertEqual(len(plan(config, city, spec)[0]), 6)


class ReportTests(SimpleTestCase):
    def test_source_date_epoch_pins_header(self):
        with mock.patch.dict(os.environ, {"SOURCE_DATE_EPOCH": "0"}):
            self.assertEqual(generated_at(), "1970-01-01T00:00:00+00:00")
            report = build_report("simulate", {"miou": 0.5}, {"city.seed": 1})
        parsed = json.loads(dumps(report))
        self.assertEqual(parsed["header"]["command"], "simulate")
        self.assertEqual(parsed["config"], {"city.seed": 1})
        self.assertEqual(dumps(report), dumps(json.loads(dumps(report))))
