import csv
import math
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from apps.common.exceptions import ConfigurationError, ShapeError, TrainingDiverged
from apps.fusion.gru import gru_update
from apps.fusion.moving_average import ma_update
from apps.fusion.weights import GruWeights
from apps.simulator.config import load_run_config
from apps.tensor_core.feature_map import FeatureMap
from .backward import LossReport, gru_backward, ma_backward, mse_loss
from .finite_difference import check_gru_gradients, finite_difference, relative_error
from .trainer import TraversalPair, TrainingSetup, class_balance, train_gru, write_loss_csv


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class FiniteDifferenceTests(SimpleTestCase):
    def test_quadratic(self):
        grad = finite_difference(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-4)
        self.assertAlmostEqual(grad[0], 6.0, delta=1e-6)

    def test_constant(self):
        grad = finite_difference(lambda x: 5.0, np.zeros(3))
        np.testing.assert_array_equal(grad, 0.0)

    def test_sigmoid_sum(self):
        x = np.array([-2.0, -0.5, 0.3, 1.7])
        grad = finite_difference(lambda v: float(np.sum(1 / (1 + np.exp(-v)))), x)
        s = 1 / (1 + np.exp(-x))
        np.testing.assert_allclose(grad, s * (1 - s), atol=1e-6)

    def test_parameters_restored(self):
        x = np.array([1.0, 2.0, 3.0])
        finite_difference(lambda v: float(v.sum()), x)
        np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])

    def test_relative_error_scale_floor(self):
        self.assertEqual(relative_error(np.zeros(2), np.zeros(2)), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1.1]), np.array([1.0])), 0.1)


def scalar_weights(wz, wr, wh, bz, br, bh):
    """1-channel GRU whose 3x3 kernels only have centre taps; wx = (prior tap, current tap)."""
    blocks = {}
    for name, taps in (("w_z", wz), ("w_r", wr), ("w_h", wh)):
        kernel = np.zeros((1, 2, 3, 3))
        kernel[0, 0, 1, 1], kernel[0, 1, 1, 1] = taps
        blocks[name] = kernel
    blocks.update(b_z=np.array([bz]), b_r=np.array([br]), b_h=np.array([bh]))
    return GruWeights(**blocks)


class GruBackwardTests(SimpleTestCase):
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        w = GruWeights.initialize(3, 1, dtype=np.float64)
        result = gru_update(FeatureMap(rng.normal(size=(4, 4, 3))), FeatureMap(rng.normal(size=(4, 4, 3))), w)
        grads = gru_backward(result, w, np.zeros((4, 4, 3)))
        for g in list(grads.weights.values()) + [grads.prior, grads.refined]:
            np.testing.assert_array_equal(g, 0.0)

    def test_scalar_case_matches_hand_derivation(self):
        (wzp, wzo), (wrp, wro), (whp, who) = (0.4, -0.3), (0.7, 0.2), (-0.5, 0.9)
        bz, br, bh = 0.1, -0.2, 0.05
        p, o = 0.6, -0.8
        w = scalar_weights((wzp, wzo), (wrp, wro), (whp, who), bz, br, bh)
        result = gru_update(FeatureMap(np.full((1, 1, 1), p)), FeatureMap(np.full((1, 1, 1), o)), w)
        grads = gru_backward(result, w, np.ones((1, 1, 1)))

        z = sigmoid(wzp * p + wzo * o + bz)
        r = sigmoid(wrp * p + wro * o + br)
        h = math.tanh(whp * r * p + who * o + bh)
        dz = z * (1 - z) * (h - p)
        dh = z * (1 - h * h)
        dr = dh * whp * p * r * (1 - r)
        expected = {
            "b_z": dz, "b_r": dr, "b_h": dh,
            "w_z": (dz * p, dz * o), "w_r": (dr * p, dr * o), "w_h": (dh * r * p, dh * o),
        }
        for name in ("b_z", "b_r", "b_h"):
            self.assertAlmostEqual(grads.weights[name][0], expected[name], places=12)
        for name in ("w_z", "w_r", "w_h"):
            g = grads.weights[name]
            self.assertAlmostEqual(g[0, 0, 1, 1], expected[name][0], places=12)
            self.assertAlmostEqual(g[0, 1, 1, 1], expected[name][1], places=12)
            self.assertEqual(np.count_nonzero(g[:, :, 0, :]) + np.count_nonzero(g[:, :, 2, :]), 0)

        d_prior = (1 - z) + dh * whp * r + dr * wrp + dz * wzp
        d_current = dh * who + dr * wro + dz * wzo
        self.assertAlmostEqual(grads.prior[0, 0, 0], d_prior, places=12)
        self.assertAlmostEqual(grads.refined[0, 0, 0], d_current, places=12)

    def test_matches_central_differences_over_seeds(self):
        worst = 0.0
        for seed in range(20):
            worst = max(worst, max(check_gru_gradients(seed).values()))
        self.assertLessEqual(worst, 1e-4)

    def test_partial_coverage(self):
        for seed in range(3):
            errors = check_gru_gradients(seed, prior_coverage=0.5)
            self.assertLessEqual(max(errors.values()), 1e-4)

    def test_upstream_shape_checked(self):
        w = GruWeights.initialize(2, 1, dtype=np.float64)
        result = gru_update(FeatureMap(np.zeros((3, 3, 2))), FeatureMap(np.zeros((3, 3, 2))), w)
        with self.assertRaises(ShapeError):
            gru_backward(result, w, np.zeros((3, 3, 1)))


class MovingAverageBackwardTests(SimpleTestCase):
    def test_matches_central_differences(self):
        rng = np.random.default_rng(4)
        current, prior, upstream = (rng.normal(size=(5, 5, 3)) for _ in range(3))
        coverage = rng.random((5, 5)) < 0.6
        alpha = np.array([0.3])

        def loss(*_):
            out = ma_update(FeatureMap(current), FeatureMap(prior, coverage), float(alpha[0])).data
            return float(np.sum(upstream * out))

        d_current, d_prior, d_alpha = ma_backward(current, prior, coverage, 0.3, upstream)
        np.testing.assert_allclose(d_current, finite_difference(loss, current), atol=1e-8)
        np.testing.assert_allclose(d_prior, finite_difference(loss, prior), atol=1e-8)
        self.assertAlmostEqual(d_alpha, finite_difference(loss, alpha)[0], places=6)
        self.assertTrue((d_prior[~coverage] == 0).all())


class MseTests(SimpleTestCase):
    def test_value_and_gradient(self):
        rng = np.random.default_rng(2)
        pred, target = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        loss, grad = mse_loss(pred, target)
        self.assertAlmostEqual(loss, float(np.mean((pred - target) ** 2)))
        numeric = finite_difference(lambda p: mse_loss(p, target)[0], pred.copy())
        np.testing.assert_allclose(grad, numeric, atol=1e-8)

    def test_loss_report_dict(self):
        report = LossReport(3, 0.25, {"w_z": 1.0, "b_z": 2.0})
        self.assertEqual(list(report.as_dict()["grad_norms"]), ["b_z", "w_z"])


SMALL = TrainingSetup(crop_cells=10, train_pairs=6, held_out_pairs=4, batch_size=2)


def training_config():
    return load_run_config(overrides={"city.extent_m": 200.0, "grid.channels": 8, "grid.tile_edge": 32})


class TrainerTests(SimpleTestCase):
    def test_zero_learning_rate_keeps_weights(self):
        result = train_gru(training_config(), epochs=5, learning_rate=0.0, seed=7, setup=SMALL)
        initial = GruWeights.blend(8)
        for name, block in result.weights.blocks().items():
            np.testing.assert_array_equal(block, initial.blocks()[name])
        self.assertEqual(len({report.mse for report in result.history}), 1)

    def test_descent_on_noiseless_target(self):
        result = train_gru(training_config(), epochs=40, learning_rate=1.0, seed=7, setup=SMALL)
        self.assertLessEqual(result.held_out_mse, result.initial_held_out_mse)
        self.assertGreater(result.baseline_mse, 0.0)

    def test_bit_reproducible(self):
        a = train_gru(training_config(), epochs=4, learning_rate=1.0, seed=3, setup=SMALL)
        b = train_gru(training_config(), epochs=4, learning_rate=1.0, seed=3, setup=SMALL)
        for name, block in a.weights.blocks().items():
            np.testing.assert_array_equal(block, b.weights.blocks()[name])
        self.assertEqual([r.mse for r in a.history], [r.mse for r in b.history])

    def test_divergence_aborts_with_history(self):
        def broken(pred, target, cell_weights=None):
            return float("nan"), np.zeros_like(pred)

        with mock.patch("apps.gradcheck.trainer.mse_loss", side_effect=broken):
            with self.assertRaises(TrainingDiverged) as ctx:
                train_gru(training_config(), epochs=3, learning_rate=1.0, seed=7, setup=SMALL)
        self.assertEqual(len(ctx.exception.history), 1)

    def test_negative_learning_rate(self):
        with self.assertRaises(ConfigurationError):
            train_gru(training_config(), epochs=1, learning_rate=-0.1, setup=SMALL)

    def test_loss_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_loss_csv([LossReport(0, 0.5), LossReport(1, 0.25)], Path(tmp) / "loss.csv")
            with path.open() as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(rows, [["step", "mse"], ["0", "0.5"], ["1", "0.25"]])

    def test_class_balance_has_unit_mean(self):
        labels = np.zeros((4, 5), dtype=np.uint8)
        labels[0, :2] = 1
        labels[3, 4] = 3
        empty = FeatureMap.zeros(4, 5, 4)
        pair = TraversalPair(empty, empty, np.zeros((4, 5, 4)), labels)
        table = class_balance([pair])
        np.testing.assert_allclose(table, [20 / 51, 20 / 6, 1.0, 20 / 3])
        self.assertAlmostEqual(float(table[labels].mean()), 1.0)

    def test_blend_start_matches_the_moving_average_baseline(self):
        result = train_gru(training_config(), epochs=0, seed=7, setup=SMALL)
        self.assertLessEqual(result.initial_held_out_mse, result.baseline_mse)
        self.assertEqual(result.held_out_mse, result.initial_held_out_mse)

    def test_weighted_loss_gradient(self):
        rng = np.random.default_rng(2)
        pred, target = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
        cell_weights = rng.uniform(0.5, 2.0, size=(3, 3))
        loss, grad = mse_loss(pred, target, cell_weights)
        numeric = finite_difference(lambda p: mse_loss(p, target, cell_weights)[0], pred.copy())
        np.testing.assert_allclose(grad, numeric, atol=1e-8)
        self.assertAlmostEqual(loss, float(np.mean(cell_weights[..., None] * (pred - target) ** 2)))


class DefaultTrainingTests(SimpleTestCase):
    """One 200-step run at the default configuration and seed."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.result = train_gru(load_run_config())

    def test_beats_moving_average_on_held_out_pairs(self):
        self.assertLessEqual(self.result.held_out_mse, self.result.baseline_mse * 1.05)

    def test_loss_falls_across_fifty_step_windows(self):
        losses = [report.mse for report in self.result.history]
        self.assertEqual(len(losses), 200)
        windows = [losses[i + 50] <= losses[i] for i in range(len(losses) - 50)]
        self.assertGreaterEqual(sum(windows) / len(windows), 0.9)
