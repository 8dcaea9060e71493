import math
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from apps.common.exceptions import CheckpointFormatError, ConfigurationError, ShapeError
from apps.geometry.grid import GridSpec
from apps.tensor_core.feature_map import FeatureMap
from .attention import cross_attend, c2p_attention, from_patches, to_patches
from .checkpoint import decode_weights, encode_weights, sections_of
from .gru import gru_update
from .moving_average import ma_update
from .services import fuse
from .weights import AttentionWeights, FusionWeights, GruWeights, PositionalEmbeddings


def random_map(rng, rows, cols, channels, dtype=np.float32):
    return FeatureMap(rng.normal(size=(rows, cols, channels)).astype(dtype))


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_gru(p, o, w):
    rows, cols, ch = p.shape

    def conv_at(x, kernel, bias, i, j, c):
        acc = float(bias[c])
        for k in range(x.shape[2]):
            for a in range(3):
                for b in range(3):
                    ii, jj = i + a - 1, j + b - 1
                    if 0 <= ii < rows and 0 <= jj < cols:
                        acc += x[ii, jj, k] * kernel[c, k, a, b]
        return acc

    x1 = np.concatenate([p, o], axis=-1)
    r = np.zeros_like(p)
    z = np.zeros_like(p)
    for i in range(rows):
        for j in range(cols):
            for c in range(ch):
                z[i, j, c] = sig(conv_at(x1, w.w_z, w.b_z, i, j, c))
                r[i, j, c] = sig(conv_at(x1, w.w_r, w.b_r, i, j, c))
    x2 = np.concatenate([r * p, o], axis=-1)
    out = np.zeros_like(p)
    for i in range(rows):
        for j in range(cols):
            for c in range(ch):
                h = math.tanh(conv_at(x2, w.w_h, w.b_h, i, j, c))
                out[i, j, c] = (1 - z[i, j, c]) * p[i, j, c] + z[i, j, c] * h
    return out


class MovingAverageTests(SimpleTestCase):
    def test_alpha_one_is_current(self):
        rng = np.random.default_rng(0)
        cur, pri = random_map(rng, 3, 3, 2), random_map(rng, 3, 3, 2)
        np.testing.assert_array_equal(ma_update(cur, pri, 1.0).data, cur.data)

    def test_alpha_zero_is_prior(self):
        rng = np.random.default_rng(1)
        cur, pri = random_map(rng, 3, 3, 2), random_map(rng, 3, 3, 2)
        np.testing.assert_array_equal(ma_update(cur, pri, 0.0).data, pri.data)

    def test_midpoint(self):
        out = ma_update(FeatureMap.filled(2, 2, 1, 2.0), FeatureMap.filled(2, 2, 1, 4.0), 0.5)
        np.testing.assert_allclose(out.data, 3.0)

    def test_uncovered_prior_forces_current(self):
        prior = FeatureMap.filled(2, 2, 1, 4.0)
        prior.coverage[0, 0] = False
        out = ma_update(FeatureMap.filled(2, 2, 1, 2.0), prior, 0.0)
        self.assertEqual(float(out.data[0, 0, 0]), 2.0)
        self.assertEqual(float(out.data[1, 1, 0]), 4.0)

    def test_alpha_out_of_range(self):
        with self.assertRaises(ConfigurationError):
            ma_update(FeatureMap.zeros(1, 1, 1), FeatureMap.zeros(1, 1, 1), 1.5)


class GruUpdateTests(SimpleTestCase):
    def test_closed_gate_keeps_prior(self):
        rng = np.random.default_rng(2)
        w = GruWeights.initialize(3, seed=0)
        w.b_z[:] = -20.0
        prior, cur = random_map(rng, 5, 5, 3), random_map(rng, 5, 5, 3)
        out = gru_update(prior, cur, w).output
        self.assertLessEqual(np.abs(out.data - prior.data).max(), 1e-6)

    def test_open_gate_takes_candidate(self):
        rng = np.random.default_rng(3)
        w = GruWeights.initialize(3, seed=1)
        w.b_z[:] = 20.0
        w.b_r[:] = 20.0
        prior, cur = random_map(rng, 5, 5, 3), random_map(rng, 5, 5, 3)
        result = gru_update(prior, cur, w)
        self.assertLessEqual(np.abs(result.output.data - result.candidate).max(), 1e-6)

    def test_matches_scalar_reimplementation(self):
        rng = np.random.default_rng(4)
        w = GruWeights.initialize(4, seed=2, dtype=np.float64)
        w.b_z[:] = rng.normal(size=4)
        w.b_r[:] = rng.normal(size=4)
        prior = random_map(rng, 6, 6, 4, np.float64)
        cur = random_map(rng, 6, 6, 4, np.float64)
        out = gru_update(prior, cur, w).output.data
        self.assertLessEqual(np.abs(out - scalar_gru(prior.data, cur.data, w)).max(), 1e-5)

    def test_gate_ranges_and_convexity(self):
        rng = np.random.default_rng(5)
        for seed in range(1000):
            w = GruWeights.initialize(2, seed=seed)
            prior, cur = random_map(rng, 3, 3, 2), random_map(rng, 3, 3, 2)
            res = gru_update(prior, cur, w)
            self.assertTrue(((res.z > 0) & (res.z < 1)).all())
            self.assertTrue(((res.r > 0) & (res.r < 1)).all())
            self.assertTrue(((res.candidate > -1) & (res.candidate < 1)).all())
            lo = np.minimum(res.prior, res.candidate) - 1e-6
            hi = np.maximum(res.prior, res.candidate) + 1e-6
            self.assertTrue(((res.output.data >= lo) & (res.output.data <= hi)).all())

    def test_uncovered_prior_takes_the_candidate(self):
        rng = np.random.default_rng(6)
        w = GruWeights.initialize(2, seed=3)
        prior = random_map(rng, 4, 4, 2)
        prior.coverage[:] = False
        cur = random_map(rng, 4, 4, 2)
        a = gru_update(prior, cur, w)
        b = gru_update(FeatureMap.zeros(4, 4, 2), cur, w)
        np.testing.assert_array_equal(a.z, 1.0)
        np.testing.assert_array_equal(a.output.data, b.candidate)
        self.assertTrue(a.output.coverage.all())

    def test_gate_is_higher_where_the_prior_has_a_gap(self):
        rng = np.random.default_rng(13)
        for seed in range(20):
            w = GruWeights.initialize(4, seed=seed)
            prior = random_map(rng, 8, 8, 4)
            prior.coverage[2:6, 2:6] = False
            gate = gru_update(prior, random_map(rng, 8, 8, 4), w).gate
            self.assertGreater(gate[~prior.coverage].mean(), gate[prior.coverage].mean())

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            gru_update(FeatureMap.zeros(2, 2, 2), FeatureMap.zeros(2, 3, 2), GruWeights.initialize(2, 0))


def small_attention(channels=1, patch=2, dim=4, heads=1, seed=0):
    return AttentionWeights.initialize(channels, seed, patch_size=patch, dim=dim, heads=heads)


class C2pAttentionTests(SimpleTestCase):
    def test_empty_prior_passes_current(self):
        rng = np.random.default_rng(7)
        cur = random_map(rng, 4, 6, 2)
        prior = FeatureMap.zeros(4, 6, 2, covered=False)
        w = small_attention(channels=2, dim=8, heads=2)
        pe = PositionalEmbeddings.initialize(4, 6, 2, seed=1)
        np.testing.assert_array_equal(c2p_attention(cur, prior, pe, w).data, cur.data)

    def test_zero_value_path_is_residual(self):
        rng = np.random.default_rng(8)
        cur, prior = random_map(rng, 4, 4, 2), random_map(rng, 4, 4, 2)
        w = small_attention(channels=2, dim=8, heads=2)
        w.w_v[:] = 0
        w = w.zero_value_path()
        pe = PositionalEmbeddings.initialize(4, 4, 2, seed=2)
        np.testing.assert_array_equal(c2p_attention(cur, prior, pe, w).data, cur.data)

    def test_identical_prior_tokens_give_uniform_weights(self):
        rng = np.random.default_rng(9)
        w = small_attention(seed=3)
        cur = random_map(rng, 2, 6, 1, np.float64)
        patch = rng.normal(size=(2, 2, 1))
        prior = FeatureMap(np.concatenate([patch, patch, patch], axis=1))
        pe = PositionalEmbeddings.zeros(2, 6, 1)
        result = cross_attend(cur, prior, pe, w)
        np.testing.assert_allclose(result.weights, 1.0 / 3.0, atol=1e-6)

        # dense single-head computation, one token at a time
        f64 = {k: v.astype(np.float64) for k, v in w.blocks().items()}
        keys, values = [], []
        for j in range(3):
            y = prior.data[:, 2 * j:2 * j + 2].reshape(-1) @ f64["w_embed_kv"]
            keys.append(y @ f64["w_k"])
            values.append(y @ f64["w_v"])
        expected = cur.data.copy()
        for i in range(3):
            x = cur.data[:, 2 * i:2 * i + 2].reshape(-1) @ f64["w_embed_q"]
            q = x @ f64["w_q"]
            scores = np.array([q @ k for k in keys]) / math.sqrt(4)
            a = np.exp(scores - scores.max())
            a /= a.sum()
            attended = sum(a[j] * values[j] for j in range(3))
            delta = (attended @ f64["w_fc"] + f64["b_fc"]) @ f64["w_out"]
            expected[:, 2 * i:2 * i + 2] += delta.reshape(2, 2, 1)
        self.assertLessEqual(np.abs(result.output.data - expected).max(), 1e-5)

    def test_output_shape_and_weight_normalization(self):
        rng = np.random.default_rng(10)
        cur, prior = random_map(rng, 4, 6, 3), random_map(rng, 4, 6, 3)
        prior.coverage[:2, :2] = False
        w = small_attention(channels=3, dim=8, heads=4)
        pe = PositionalEmbeddings.initialize(4, 6, 3, seed=4)
        result = cross_attend(cur, prior, pe, w)
        self.assertEqual(result.output.shape, cur.shape)
        self.assertEqual(result.weights.shape, (4, 6, 5))
        np.testing.assert_allclose(result.weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_swapping_embeddings_changes_output(self):
        rng = np.random.default_rng(11)
        cur, prior = random_map(rng, 4, 4, 2), random_map(rng, 4, 4, 2)
        w = small_attention(channels=2, dim=8, heads=2, seed=5)
        pe = PositionalEmbeddings.initialize(4, 4, 2, seed=6)
        a = c2p_attention(cur, prior, pe, w).data
        b = c2p_attention(cur, prior, pe.swapped(), w).data
        self.assertGreater(np.abs(a - b).max(), 0)

    def test_indivisible_patching(self):
        w = small_attention()
        with self.assertRaises(ConfigurationError):
            c2p_attention(FeatureMap.zeros(3, 4, 1), FeatureMap.zeros(3, 4, 1), None, w, use_pe=False)

    def test_patch_roundtrip_layout(self):
        data = np.arange(4 * 6 * 2, dtype=np.float32).reshape(4, 6, 2)
        tokens = to_patches(data, 2)
        np.testing.assert_array_equal(tokens[1], data[0:2, 2:4].reshape(-1))
        np.testing.assert_array_equal(from_patches(tokens, 4, 6, 2, 2), data)


class FuseTests(SimpleTestCase):
    def setUp(self):
        self.spec = GridSpec(resolution=0.3, bev_rows=4, bev_cols=4, channels=2, patch_size=2)
        self.weights = FusionWeights.initialize(self.spec, seed=3, attention_dim=8, heads=2)
        rng = np.random.default_rng(12)
        self.current = random_map(rng, 4, 4, 2)

    def test_none_is_identity(self):
        out = fuse("none", self.current, FeatureMap.zeros(4, 4, 2, covered=False))
        self.assertIs(out.refined, self.current)
        self.assertIsNone(out.gate)

    def test_ma_constant_midpoint(self):
        out = fuse("ma", FeatureMap.filled(4, 4, 2, 1.0), FeatureMap.filled(4, 4, 2, 3.0), alpha=0.5)
        np.testing.assert_allclose(out.refined.data, 2.0)
        self.assertIs(out.refined, out.new_prior)

    def test_gru_ca_with_empty_prior_equals_gru(self):
        empty = FeatureMap.zeros(4, 4, 2, covered=False)
        a = fuse("gru_ca", self.current, empty, self.weights)
        b = fuse("gru", self.current, empty, self.weights)
        np.testing.assert_array_equal(a.refined.data, b.refined.data)
        self.assertEqual(a.gate.shape, (4, 4))

    def test_unknown_strategy(self):
        with self.assertRaises(ConfigurationError):
            fuse("kalman", self.current, self.current, self.weights)

    def test_gru_needs_weights(self):
        with self.assertRaises(ConfigurationError):
            fuse("gru", self.current, self.current)

    def test_attention_only_writes_refined_back(self):
        rng = np.random.default_rng(14)
        prior = random_map(rng, 4, 4, 2)
        out = fuse("ca", self.current, prior, self.weights)
        expected = c2p_attention(self.current, prior, self.weights.pe, self.weights.attention)
        np.testing.assert_array_equal(out.refined.data, expected.data)
        self.assertIs(out.refined, out.new_prior)
        self.assertIsNone(out.gate)

    def test_attention_only_with_empty_prior_is_identity(self):
        out = fuse("ca", self.current, FeatureMap.zeros(4, 4, 2, covered=False), self.weights)
        np.testing.assert_array_equal(out.refined.data, self.current.data)

    def test_gru_pe_adds_embeddings_to_both_inputs(self):
        rng = np.random.default_rng(15)
        prior = random_map(rng, 4, 4, 2)
        prior.coverage[0, :] = False
        out = fuse("gru_pe", self.current, prior, self.weights)
        pe = self.weights.pe
        shifted = FeatureMap(prior.data + pe.pe_prior, prior.coverage)
        expected = gru_update(shifted, FeatureMap(self.current.data + pe.pe_current), self.weights.gru)
        np.testing.assert_allclose(out.refined.data, expected.output.data, atol=1e-6)
        np.testing.assert_array_equal(out.gate[0], 1.0)

    def test_gru_pe_differs_from_plain_gru(self):
        prior = random_map(np.random.default_rng(16), 4, 4, 2)
        a = fuse("gru_pe", self.current, prior, self.weights).refined.data
        b = fuse("gru", self.current, prior, self.weights).refined.data
        self.assertGreater(np.abs(a - b).max(), 0)

    def test_learned_strategies_check_their_blocks(self):
        gru_only = FusionWeights(self.weights.gru)
        for strategy in ("ca", "gru_ca", "gru_pe"):
            with self.assertRaises(ConfigurationError):
                fuse(strategy, self.current, self.current, gru_only)


class CheckpointTests(SimpleTestCase):
    def test_roundtrip_preserves_blocks(self):
        spec = GridSpec(resolution=0.3, bev_rows=4, bev_cols=4, channels=2, patch_size=2)
        weights = FusionWeights.initialize(spec, seed=9, attention_dim=8, heads=2)
        weights.embedding = np.eye(4, 2, dtype=np.float32)
        loaded = decode_weights(encode_weights(weights))
        for name, block in weights.gru.blocks().items():
            np.testing.assert_array_equal(getattr(loaded.gru, name), block)
        self.assertEqual((loaded.attention.patch_size, loaded.attention.heads), (2, 2))
        np.testing.assert_array_equal(loaded.attention.w_out, weights.attention.w_out)
        np.testing.assert_array_equal(loaded.pe.pe_prior, weights.pe.pe_prior)
        np.testing.assert_array_equal(loaded.embedding, weights.embedding)

    def test_bad_magic(self):
        with self.assertRaises(CheckpointFormatError) as ctx:
            decode_weights(b"XXXX\x01\x00\x00\x00")
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated(self):
        data = encode_weights(FusionWeights(gru=GruWeights.initialize(2, 0)))
        with self.assertRaises(CheckpointFormatError):
            decode_weights(data[:-3])

    def test_section_name_not_utf8(self):
        data = bytearray(encode_weights(FusionWeights(gru=GruWeights.initialize(2, 0))))
        # first section name starts after magic, version, count and its length
        data[10] = 0xFF
        with self.assertRaises(CheckpointFormatError) as ctx:
            decode_weights(bytes(data))
        self.assertEqual(ctx.exception.offset, 10)

    def test_short_attention_meta(self):
        spec = GridSpec(resolution=0.3, bev_rows=4, bev_cols=4, channels=2, patch_size=2)
        weights = FusionWeights.initialize(spec, seed=9, attention_dim=8, heads=2)
        sections = sections_of(weights)
        sections["attention.meta"] = np.array([2.0], dtype=np.float32)
        with mock.patch("apps.fusion.checkpoint.sections_of", return_value=sections):
            data = encode_weights(weights)
        with self.assertRaises(CheckpointFormatError):
            decode_weights(data)

    def test_missing_pe_current(self):
        spec = GridSpec(resolution=0.3, bev_rows=4, bev_cols=4, channels=2, patch_size=2)
        weights = FusionWeights.initialize(spec, seed=9, attention_dim=8, heads=2)
        sections = sections_of(weights)
        del sections["pe.current"]
        with mock.patch("apps.fusion.checkpoint.sections_of", return_value=sections):
            data = encode_weights(weights)
        with self.assertRaises(CheckpointFormatError) as ctx:
            decode_weights(data)
        self.assertIn("pe.current", str(ctx.exception))

    def test_mismatched_block_shape(self):
        weights = FusionWeights(gru=GruWeights.initialize(2, 0))
        sections = sections_of(weights)
        sections["gru.b_r"] = np.zeros(3, dtype=np.float32)
        with mock.patch("apps.fusion.checkpoint.sections_of", return_value=sections):
            data = encode_weights(weights)
        with self.assertRaises(CheckpointFormatError):
            decode_weights(data)
