import math

import numpy as np
from django.test import SimpleTestCase

from apps.common.exceptions import ShapeError
from .feature_map import FeatureMap
from .kernels import conv2d, conv2d_backward, elementwise, matmul, softmax_rows


def conv_oracle(x, kernel, bias):
    rows, cols, in_ch = x.shape
    out_ch, _, k, _ = kernel.shape
    pad = (k - 1) // 2
    out = np.zeros((rows, cols, out_ch))
    for i in range(rows):
        for j in range(cols):
            for o in range(out_ch):
                acc = float(bias[o])
                for c in range(in_ch):
                    for a in range(k):
                        for b in range(k):
                            ii, jj = i + a - pad, j + b - pad
                            if 0 <= ii < rows and 0 <= jj < cols:
                                acc += x[ii, jj, c] * kernel[o, c, a, b]
                out[i, j, o] = acc
    return out


class Conv2dTests(SimpleTestCase):
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = FeatureMap(rng.normal(size=(4, 5, 3)))
        kernel = np.eye(3).reshape(3, 3, 1, 1)
        out = conv2d(x, kernel, np.zeros(3))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_padding_arithmetic(self):
        x = np.ones((5, 5, 1), dtype=np.float32)
        out = conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
        self.assertEqual(out[2, 2, 0], 9)
        self.assertEqual(out[0, 0, 0], 4)
        self.assertEqual(out[4, 4, 0], 4)
        self.assertEqual(out[0, 2, 0], 6)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 7, 3)).astype(np.float32)
        kernel = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        bias = rng.normal(size=4).astype(np.float32)
        out = conv2d(x, kernel, bias)
        expected = conv_oracle(x.astype(np.float64), kernel.astype(np.float64), bias)
        self.assertLessEqual(np.abs(out - expected).max(), 1e-5)

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            conv2d(np.zeros((3, 3, 2)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_even_kernel_rejected(self):
        with self.assertRaises(ShapeError):
            conv2d(np.zeros((3, 3, 1)), np.zeros((1, 1, 2, 2)), np.zeros(1))

    def test_linearity(self):
        rng = np.random.default_rng(2)
        kernel = rng.normal(size=(2, 3, 3, 3))
        zero = np.zeros(2)
        for _ in range(5):
            x = rng.normal(size=(6, 6, 3))
            y = rng.normal(size=(6, 6, 3))
            a, b = rng.normal(size=2)
            lhs = conv2d(a * x + b * y, kernel, zero)
            rhs = a * conv2d(x, kernel, zero) + b * conv2d(y, kernel, zero)
            self.assertLessEqual(np.abs(lhs - rhs).max(), 1e-5)

    def test_backward_matches_loops(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 4, 2))
        kernel = rng.normal(size=(3, 2, 3, 3))
        g = rng.normal(size=(5, 4, 3))
        d_x, d_k, d_b = conv2d_backward(x, kernel, g)

        padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        expected_k = np.zeros_like(kernel)
        for o in range(3):
            for c in range(2):
                for a in range(3):
                    for b in range(3):
                        expected_k[o, c, a, b] = np.sum(g[:, :, o] * padded[a:a + 5, b:b + 4, c])
        np.testing.assert_allclose(d_k, expected_k, atol=1e-10)
        np.testing.assert_allclose(d_b, g.sum(axis=(0, 1)), atol=1e-10)

        # <g, conv(x)> is linear in x, so its gradient is exact under perturbation
        delta = rng.normal(size=x.shape)
        lhs = np.sum(g * (conv2d(x + delta, kernel, np.zeros(3)) - conv2d(x, kernel, np.zeros(3))))
        self.assertAlmostEqual(lhs, float(np.sum(d_x * delta)), places=8)

    def test_bit_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(9, 9, 4)).astype(np.float32)
        kernel = rng.normal(size=(4, 4, 3, 3)).astype(np.float32)
        bias = np.zeros(4, dtype=np.float32)
        np.testing.assert_array_equal(conv2d(x, kernel, bias), conv2d(x, kernel, bias))


class MatmulTests(SimpleTestCase):
    def test_identity(self):
        a = np.arange(12, dtype=float).reshape(3, 4)
        np.testing.assert_array_equal(matmul(a, np.eye(4)), a)

    def test_scalar_case(self):
        self.assertEqual(matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0], 6.0)

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        self.assertLessEqual(np.abs(matmul(a, b) - expected).max(), 1e-6)

    def test_shape_error(self):
        with self.assertRaises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class SoftmaxTests(SimpleTestCase):
    def test_constant_row(self):
        out = softmax_rows(np.full((2, 5), 3.7))
        np.testing.assert_allclose(out, 0.2)

    def test_closed_form(self):
        out = softmax_rows(np.array([[0.0, math.log(3.0)]]), scale=1.0)
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_large_values_stay_finite(self):
        out = softmax_rows(np.array([[1e4, 0.0, -5.0]], dtype=np.float32))
        self.assertTrue(np.isfinite(out).all())
        self.assertAlmostEqual(float(out.sum()), 1.0, delta=1e-6)

    def test_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(6)
        m = rng.normal(scale=4.0, size=(7, 9))
        out = softmax_rows(m, scale=0.5)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        shifted = softmax_rows(m + rng.normal(size=(7, 1)) * 10, scale=0.5)
        self.assertLessEqual(np.abs(shifted - out).max(), 1e-6)


class ElementwiseTests(SimpleTestCase):
    def test_sigmoid_zero(self):
        out = elementwise("sigmoid", FeatureMap.zeros(3, 2, 4))
        np.testing.assert_allclose(out.data, 0.5)

    def test_hadamard_with_ones(self):
        rng = np.random.default_rng(7)
        x = FeatureMap(rng.normal(size=(3, 3, 2)))
        out = elementwise("hadamard", x, FeatureMap.filled(3, 3, 2, 1.0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_concat_order(self):
        prior = FeatureMap.filled(2, 2, 2, 1.0)
        current = FeatureMap.filled(2, 2, 3, 2.0)
        out = elementwise("concat_channels", prior, current)
        self.assertEqual(out.channels, 5)
        np.testing.assert_array_equal(out.data[0, 0], [1, 1, 2, 2, 2])

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            elementwise("add", FeatureMap.zeros(2, 2, 1), FeatureMap.zeros(2, 3, 1))

    def test_sigmoid_extreme_inputs_finite(self):
        out = elementwise("sigmoid", np.array([[[-1e4, 1e4]]], dtype=np.float32))
        self.assertTrue(np.isfinite(out).all())
