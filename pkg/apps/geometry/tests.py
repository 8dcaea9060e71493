import math

import numpy as np
from django.test import SimpleTestCase

from apps.common.exceptions import ConfigurationError, ShapeError
from apps.tensor_core.feature_map import FeatureMap
from apps.tile_store.keys import TileKey
from .grid import GridCoords, GridSpec, bev_cells, local_grid_coords, overlapping_tiles
from .pose import EgoPose, normalize_yaw
from .sampling import bilinear_sample, bilinear_splat


def small_spec(**kwargs):
    values = dict(resolution=1.0, bev_rows=2, bev_cols=2, channels=1, tile_edge=4, patch_size=1)
    values.update(kwargs)
    return GridSpec(**values)


class PoseTests(SimpleTestCase):
    def test_yaw_normalized_to_half_open_interval(self):
        self.assertAlmostEqual(normalize_yaw(3 * math.pi), math.pi)
        self.assertAlmostEqual(normalize_yaw(-math.pi), math.pi)
        self.assertAlmostEqual(EgoPose(0, 0, -3 * math.pi / 2).yaw, math.pi / 2)

    def test_from_matrix(self):
        yaw = 0.4
        m = np.eye(4)
        m[:2, :2] = [[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]]
        m[:3, 3] = [5.0, -2.0, 1.5]
        pose = EgoPose.from_matrix(m)
        self.assertAlmostEqual(pose.x, 5.0)
        self.assertAlmostEqual(pose.y, -2.0)
        self.assertAlmostEqual(pose.yaw, yaw)

    def test_from_matrix_rejects_bad_shape(self):
        with self.assertRaises(ShapeError):
            EgoPose.from_matrix(np.eye(3))

    def test_to_ego_inverts_to_global(self):
        pose = EgoPose(3.0, 4.0, 1.1)
        pts = np.array([[1.0, 2.0], [-3.0, 0.5]])
        np.testing.assert_allclose(pose.to_ego(pose.to_global(pts)), pts, atol=1e-12)


class GridSpecTests(SimpleTestCase):
    def test_map_resolution_defaults_to_bev(self):
        self.assertEqual(small_spec(resolution=0.3).map_resolution, 0.3)

    def test_rejects_indivisible_patch(self):
        with self.assertRaises(ConfigurationError):
            GridSpec(bev_rows=25, bev_cols=20, patch_size=10)

    def test_rejects_too_many_channels(self):
        with self.assertRaises(ConfigurationError):
            small_spec(channels=300)

    def test_preset_cells_floor_to_patches(self):
        self.assertEqual(bev_cells("60x30", 0.3, 10), (200, 100))
        self.assertEqual(bev_cells("test", 0.3, 10), (60, 30))
        with self.assertRaises(ConfigurationError):
            bev_cells("nope", 0.3, 10)


class LocalGridCoordsTests(SimpleTestCase):
    def test_identity_pose_quadrants(self):
        coords = local_grid_coords(small_spec(), EgoPose(0, 0, 0))
        np.testing.assert_allclose(coords.xy[0, 0], [0.5, 0.5])
        np.testing.assert_allclose(coords.xy[0, 1], [0.5, -0.5])
        np.testing.assert_allclose(coords.xy[1, 0], [-0.5, 0.5])
        np.testing.assert_allclose(coords.xy[1, 1], [-0.5, -0.5])

    def test_pure_translation_shifts_x(self):
        spec = small_spec()
        base = local_grid_coords(spec, EgoPose(0, 0, 0))
        moved = local_grid_coords(spec, EgoPose(10, 0, 0))
        np.testing.assert_allclose(moved.x, base.x + 10)
        np.testing.assert_allclose(moved.y, base.y)

    def test_quarter_turn_matches_matrix_oracle(self):
        spec = small_spec(bev_rows=6, bev_cols=4)
        base = local_grid_coords(spec, EgoPose(0, 0, 0))
        turned = local_grid_coords(spec, EgoPose(0, 0, math.pi / 2))
        for i in range(6):
            for j in range(4):
                x, y = base.xy[i, j]
                np.testing.assert_allclose(turned.xy[i, j], [-y, x], atol=1e-12)

    def test_inverse_transform_recovers_ego_centers(self):
        spec = small_spec(resolution=0.3, bev_rows=6, bev_cols=4, patch_size=2)
        origin = local_grid_coords(spec, EgoPose(0, 0, 0)).xy
        rng = np.random.default_rng(3)
        for _ in range(20):
            pose = EgoPose(*rng.uniform(-500, 500, size=2), rng.uniform(-4, 4))
            back = pose.to_ego(local_grid_coords(spec, pose).xy)
            self.assertLessEqual(np.abs(back - origin).max(), 1e-9)

    def test_rotation_and_translation(self):
        spec = small_spec(bev_rows=4, bev_cols=2)
        pose = EgoPose(10.0, -3.0, math.pi / 2)
        coords = local_grid_coords(spec, pose)
        # forward (+x ego) maps to +y global under a quarter turn
        np.testing.assert_allclose(coords.xy[0, 0], [10.0 - 0.5, -3.0 + 1.5], atol=1e-12)

    def test_cell_spacing_equals_resolution(self):
        spec = small_spec(resolution=0.3, bev_rows=6, bev_cols=4, patch_size=2)
        coords = local_grid_coords(spec, EgoPose(1.0, 2.0, 0.7))
        step = np.linalg.norm(coords.xy[1:] - coords.xy[:-1], axis=-1)
        np.testing.assert_allclose(step, 0.3, atol=1e-12)

    def test_non_finite_coords_rejected(self):
        with self.assertRaises(ShapeError):
            GridCoords(np.full((1, 1, 2), np.nan))


class OverlappingTilesTests(SimpleTestCase):
    def test_matches_per_cell_enumeration(self):
        spec = GridSpec(resolution=0.3, bev_rows=40, bev_cols=20, channels=2, tile_edge=16)
        rng = np.random.default_rng(0)
        for _ in range(100):
            pose = EgoPose(*rng.uniform(-30, 30, size=2), rng.uniform(-math.pi, math.pi))
            coords = local_grid_coords(spec, pose)
            expected = set()
            for x, y in coords.xy.reshape(-1, 2):
                gx = math.floor(x / spec.map_resolution)
                gy = math.floor(y / spec.map_resolution)
                expected.add(TileKey(gx // spec.tile_edge, gy // spec.tile_edge))
            self.assertEqual(overlapping_tiles(spec, coords), expected)

    def test_single_tile_and_straddle(self):
        spec = GridSpec(resolution=1.0, bev_rows=4, bev_cols=2, channels=1, tile_edge=8, patch_size=2)
        self.assertEqual(overlapping_tiles(spec, local_grid_coords(spec, EgoPose(4, 4, 0))), {TileKey(0, 0)})
        straddle = overlapping_tiles(spec, local_grid_coords(spec, EgoPose(8, 4, 0)))
        self.assertEqual(straddle, {TileKey(0, 0), TileKey(1, 0)})

    def test_negative_coordinates_use_floor(self):
        spec = small_spec()
        coords = GridCoords(np.array([[[-0.5, -0.5]]]))
        self.assertEqual(overlapping_tiles(spec, coords), {TileKey(-1, -1)})


class BilinearSampleTests(SimpleTestCase):
    def source(self):
        data = np.zeros((2, 1, 1), dtype=np.float32)
        data[0, 0, 0], data[1, 0, 0] = 1.0, 3.0
        return FeatureMap(data)

    def test_midpoint_of_two_cells(self):
        # cell centers at x = 0.5 and 1.5, y = 0.5
        out = bilinear_sample(self.source(), (0, 0), 1.0, GridCoords(np.array([[[1.0, 0.5]]])))
        self.assertTrue(out.coverage[0, 0])
        self.assertAlmostEqual(float(out.data[0, 0, 0]), 2.0)

    def test_exact_center_reads_cell(self):
        out = bilinear_sample(self.source(), (0, 0), 1.0, GridCoords(np.array([[[1.5, 0.5]]])))
        self.assertTrue(out.coverage[0, 0])
        self.assertEqual(float(out.data[0, 0, 0]), 3.0)

    def test_uncovered_neighbor_masks_sample(self):
        src = self.source()
        src.coverage[1, 0] = False
        out = bilinear_sample(src, (0, 0), 1.0, GridCoords(np.array([[[1.0, 0.5]]])))
        self.assertFalse(out.coverage[0, 0])
        self.assertEqual(float(out.data[0, 0, 0]), 0.0)

    def test_out_of_bounds_masks_sample(self):
        out = bilinear_sample(self.source(), (0, 0), 1.0, GridCoords(np.array([[[2.0, 0.5]]])))
        self.assertFalse(out.coverage[0, 0])

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        src = FeatureMap(rng.normal(size=(6, 5, 2)))
        src.coverage[2, 3] = False
        pts = rng.uniform(-1.0, 7.0, size=(4, 4, 2))
        origin = (-1, 2)
        out = bilinear_sample(src, origin, 0.5, GridCoords(pts))
        for r in range(4):
            for c in range(4):
                u = pts[r, c, 0] / 0.5 - 0.5 - origin[0]
                v = pts[r, c, 1] / 0.5 - 0.5 - origin[1]
                i0, j0 = math.floor(u), math.floor(v)
                fu, fv = u - i0, v - j0
                acc, ok = np.zeros(2), True
                for i, j, w in ((i0, j0, (1 - fu) * (1 - fv)), (i0 + 1, j0, fu * (1 - fv)),
                                (i0, j0 + 1, (1 - fu) * fv), (i0 + 1, j0 + 1, fu * fv)):
                    if w == 0:
                        continue
                    if 0 <= i < 6 and 0 <= j < 5 and src.coverage[i, j]:
                        acc += w * src.data[i, j]
                    else:
                        ok = False
                self.assertEqual(bool(out.coverage[r, c]), ok)
                if ok:
                    np.testing.assert_allclose(out.data[r, c], acc, atol=1e-5)


class BilinearSplatTests(SimpleTestCase):
    def test_lattice_aligned_splat_is_exact(self):
        spec = GridSpec(resolution=0.3, bev_rows=4, bev_cols=2, channels=3, tile_edge=8, patch_size=2)
        rng = np.random.default_rng(2)
        values = FeatureMap(rng.normal(size=(4, 2, 3)).astype(np.float32))
        coords = local_grid_coords(spec, EgoPose(0.3 * 7, -0.3 * 4, math.pi / 2))
        result = bilinear_splat(values, coords, spec.map_resolution)
        self.assertEqual(len(result), 8)
        np.testing.assert_allclose(result.weight, 1.0)
        back = bilinear_sample(
            FeatureMap(self._dense(result)[0], self._dense(result)[1]),
            (int(result.gx.min()), int(result.gy.min())),
            spec.map_resolution,
            coords,
        )
        self.assertTrue(back.coverage.all())
        np.testing.assert_array_equal(back.data, values.data)

    def test_weight_spread_and_threshold(self):
        values = FeatureMap(np.array([[[2.0]]]))
        # u = v = 0.02 puts weight 0.0004 on the diagonal neighbor
        coords = GridCoords(np.array([[[0.52, 0.52]]]))
        result = bilinear_splat(values, coords, 1.0, min_weight=0.05)
        self.assertEqual(len(result), 1)
        self.assertEqual((int(result.gx[0]), int(result.gy[0])), (0, 0))
        np.testing.assert_allclose(result.features[:, 0], 2.0)

    def test_uncovered_cells_are_not_splatted(self):
        values = FeatureMap(np.ones((1, 2, 1)), np.array([[True, False]]))
        coords = GridCoords(np.array([[[0.5, 0.5], [0.5, 1.5]]]))
        result = bilinear_splat(values, coords, 1.0)
        self.assertEqual(len(result), 1)

    @staticmethod
    def _dense(result):
        rows = int(result.gx.max() - result.gx.min() + 1)
        cols = int(result.gy.max() - result.gy.min() + 1)
        data = np.zeros((rows, cols, result.features.shape[1]), dtype=np.float32)
        cov = np.zeros((rows, cols), dtype=bool)
        data[result.gx - result.gx.min(), result.gy - result.gy.min()] = result.features
        cov[result.gx - result.gx.min(), result.gy - result.gy.min()] = True
        return data, cov
