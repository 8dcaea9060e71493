import math
import shutil
import tempfile
import threading
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from apps.common.exceptions import ShapeError, StoreIOError, TileFormatError
from apps.geometry.grid import GridSpec, local_grid_coords, overlapping_tiles
from apps.geometry.pose import EgoPose
from apps.tensor_core.feature_map import FeatureMap
from .codec import HEADER, describe, load_tile, save_tile
from .keys import TileKey
from .store import ReadWriteLock, TileStore
from .tile import MapTile

SPEC = GridSpec(resolution=0.3, bev_rows=20, bev_cols=10, channels=4, tile_edge=16, patch_size=10)


def lattice_pose(kx, ky, yaw=0.0):
    return EgoPose(SPEC.resolution * kx, SPEC.resolution * ky, yaw)


def random_prior(seed):
    rng = np.random.default_rng(seed)
    return FeatureMap(rng.normal(size=(SPEC.bev_rows, SPEC.bev_cols, SPEC.channels)).astype(np.float32))


def random_tile(rng, edge=8, channels=3, key=None):
    weight = np.where(rng.random((edge, edge)) < 0.4, rng.uniform(0.05, 3.0, (edge, edge)), 0.0)
    features = rng.normal(size=(edge, edge, channels)) * (weight > 0)[..., None]
    key = key or TileKey(int(rng.integers(-50, 50)), int(rng.integers(-50, 50)))
    version = int(rng.integers(0, 1000))
    return MapTile(key, features, weight, version, int(rng.integers(0, version + 1)),
                   int(rng.integers(0, 2**40)))


class FixedClock:
    def __init__(self, now=1_700_000_000):
        self.now = now

    def __call__(self):
        return self.now


class CodecTests(SimpleTestCase):
    def test_random_tiles_roundtrip_bitwise(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            tile = random_tile(rng)
            self.assertTrue(load_tile(save_tile(tile)).same_content(tile))

    def test_empty_tile_is_small(self):
        tile = MapTile.empty(TileKey(-3, 7), 64, 32)
        data = save_tile(tile)
        self.assertLess(len(data), 200)
        self.assertTrue(load_tile(data).same_content(tile))

    def test_long_runs_are_split(self):
        tile = MapTile.empty(TileKey(0, 0), 300, 1)
        tile.weight[-1, -1] = 1.0
        tile.features[-1, -1, 0] = 2.5
        self.assertTrue(load_tile(save_tile(tile)).same_content(tile))

    def test_corrupt_payload_fails_checksum(self):
        tile = random_tile(np.random.default_rng(1))
        data = bytearray(save_tile(tile))
        data[HEADER.size + 6] ^= 0xFF
        with self.assertRaises(TileFormatError) as ctx:
            load_tile(bytes(data))
        self.assertIn("checksum", str(ctx.exception))

    def test_bad_magic_names_offset(self):
        data = b"XXXX" + save_tile(random_tile(np.random.default_rng(2)))[4:]
        with self.assertRaises(TileFormatError) as ctx:
            load_tile(data)
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncation(self):
        data = save_tile(random_tile(np.random.default_rng(3)))
        for cut in (10, HEADER.size + 2, len(data) - 1):
            with self.assertRaises(TileFormatError):
                load_tile(data[:cut])

    def test_describe(self):
        tile = random_tile(np.random.default_rng(4), key=TileKey(2, -1))
        info = describe(save_tile(tile))
        self.assertEqual(info["key"], [2, -1])
        self.assertEqual(info["written_cells"], tile.written_cells)


class TileStoreTests(SimpleTestCase):
    def setUp(self):
        self.clock = FixedClock()
        self.store = TileStore(SPEC, clock=self.clock)

    def test_empty_store_query(self):
        prior = self.store.query_region(lattice_pose(3, 4, 0.7))
        self.assertFalse(prior.coverage.any())
        self.assertEqual(float(np.abs(prior.data).max()), 0.0)
        self.assertEqual(self.store.memory_stats().ratio, 0.0)

    def test_first_write_touches_overlapping_tiles(self):
        pose = lattice_pose(40, 17)
        touched = self.store.write_back(pose, random_prior(0))
        self.assertEqual(touched, overlapping_tiles(SPEC, local_grid_coords(SPEC, pose)))
        for key in touched:
            self.assertEqual(self.store.get_tile(key).version, 1)

    def test_lattice_roundtrip_is_exact(self):
        for yaw in (0.0, math.pi / 2, math.pi, -math.pi / 2):
            store = TileStore(SPEC, clock=self.clock)
            pose = lattice_pose(-13, 29, yaw)
            written = random_prior(1)
            store.write_back(pose, written)
            back = store.query_region(pose)
            self.assertTrue(back.coverage.all())
            np.testing.assert_array_equal(back.data, written.data)

    def test_rotated_constant_field_roundtrip(self):
        pose = EgoPose(5.123, -2.71, 0.6)
        written = FeatureMap.filled(SPEC.bev_rows, SPEC.bev_cols, SPEC.channels, 0.75)
        self.store.write_back(pose, written)
        back = self.store.query_region(pose)
        self.assertGreater(back.coverage.mean(), 0.5)
        err = np.abs(back.data[back.coverage] - 0.75).max()
        self.assertLessEqual(err, 1e-4)

    def test_repeated_identical_write(self):
        pose = lattice_pose(7, 7)
        prior = random_prior(2)
        keys = self.store.write_back(pose, prior)
        first = {k: self.store.get_tile(k) for k in keys}
        self.store.write_back(pose, prior)
        for key in keys:
            tile = self.store.get_tile(key)
            self.assertEqual(tile.version, 2)
            self.assertEqual(tile.traversal_count, 2)
            self.assertLessEqual(np.abs(tile.features - first[key].features).max(), 1e-5)

    def test_replacement_not_averaging(self):
        pose = lattice_pose(0, 0)
        self.store.write_back(pose, FeatureMap.filled(20, 10, 4, 1.0))
        self.store.write_back(pose, FeatureMap.filled(20, 10, 4, 3.0))
        np.testing.assert_array_equal(self.store.query_region(pose).data, 3.0)

    def test_half_overlap_coverage(self):
        self.store.write_back(lattice_pose(100, 100), random_prior(3))
        back = self.store.query_region(lattice_pose(100 + SPEC.bev_rows // 2, 100))
        self.assertAlmostEqual(float(back.coverage.mean()), 0.5, delta=0.05)

    def test_shape_checked(self):
        with self.assertRaises(ShapeError):
            self.store.write_back(lattice_pose(0, 0), FeatureMap.zeros(10, 10, 4))

    def test_weight_never_decreases(self):
        rng = np.random.default_rng(4)
        for i in range(6):
            pose = EgoPose(*rng.uniform(0, 3, size=2), rng.uniform(-math.pi, math.pi))
            before = {k: self.store.get_tile(k) for k in self.store.keys()}
            self.store.write_back(pose, random_prior(10 + i))
            for key, old in before.items():
                new = self.store.get_tile(key)
                self.assertTrue((new.weight >= old.weight).all())
                self.assertGreaterEqual(new.version, old.version)

    def test_single_full_tile_ratio_is_one(self):
        tile = MapTile(TileKey(2, 3), np.ones((16, 16, 4)), np.ones((16, 16)), 0, 0, 0)
        self.store.put_tile(tile, known_version=0)
        stats = self.store.memory_stats()
        self.assertEqual(stats.resident_bytes, stats.dense_equivalent_bytes)
        self.assertEqual(stats.ratio, 1.0)

    def test_reset_clears_everything(self):
        self.store.write_back(lattice_pose(0, 0), random_prior(5))
        self.store.reset()
        self.assertEqual(self.store.keys(), [])
        self.assertFalse(self.store.query_region(lattice_pose(0, 0)).coverage.any())


class PutTileTests(SimpleTestCase):
    def setUp(self):
        self.store = TileStore(SPEC, clock=FixedClock())
        self.key = TileKey(0, 0)

    def make(self, weight, value, traversals=1):
        tile = MapTile.empty(self.key, 16, 4)
        tile.weight[:] = weight
        tile.features[:] = np.where(np.asarray(weight)[..., None] > 0, value, 0.0)
        tile.traversal_count = traversals
        tile.version = traversals
        return tile

    def test_current_version_replaces(self):
        first = self.store.put_tile(self.make(2.0, 1.0), known_version=0)
        self.assertFalse(first.stale)
        self.assertEqual(first.version, 1)
        second = self.store.put_tile(self.make(0.5, 7.0), known_version=1)
        self.assertFalse(second.stale)
        self.assertEqual(second.version, 2)
        tile = self.store.get_tile(self.key)
        np.testing.assert_array_equal(tile.features, 7.0)
        np.testing.assert_array_equal(tile.weight, 2.0)

    def test_stale_put_keeps_heavier_cell(self):
        self.store.put_tile(self.make(2.0, 1.0), known_version=0)
        weight = np.full((16, 16), 1.0)
        weight[0, 0] = 3.0
        weight[0, 1] = 2.0
        result = self.store.put_tile(self.make(weight, 9.0), known_version=0)
        self.assertTrue(result.stale)
        tile = self.store.get_tile(self.key)
        self.assertEqual(float(tile.features[0, 0, 0]), 9.0)
        self.assertEqual(float(tile.features[0, 1, 0]), 9.0)  # tie goes to the upload
        self.assertEqual(float(tile.features[5, 5, 0]), 1.0)
        self.assertEqual(float(tile.weight[0, 0]), 3.0)

    def test_version_covers_traversal_count(self):
        result = self.store.put_tile(self.make(1.0, 1.0, traversals=9), known_version=0)
        self.assertEqual(result.version, 9)
        tile = self.store.get_tile(self.key)
        self.assertGreaterEqual(tile.version, tile.traversal_count)

    def test_empty_put_is_not_instantiated(self):
        self.store.put_tile(MapTile.empty(self.key, 16, 4), known_version=0)
        self.assertEqual(self.store.keys(), [])

    def test_wrong_geometry_rejected(self):
        with self.assertRaises(ShapeError):
            self.store.put_tile(MapTile.empty(self.key, 8, 4), known_version=0)

    def test_install_never_downgrades(self):
        self.store.put_tile(self.make(1.0, 1.0, traversals=5), known_version=0)
        older = self.make(1.0, 4.0, traversals=2)
        self.assertFalse(self.store.install_tile(older))
        newer = self.make(1.0, 4.0, traversals=8)
        self.assertTrue(self.store.install_tile(newer))
        self.assertEqual(self.store.get_tile(self.key).version, 8)


class PersistentStoreTests(SimpleTestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="nmp-store-")
        self.clock = FixedClock()

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def drive(self, store, steps=12):
        for i in range(steps):
            store.write_back(lattice_pose(60 * i, 25 * (i % 3)), random_prior(i))
            store.write_back(EgoPose(18.0 * i + 0.41, 7.3 * (i % 4), 0.2 * i), random_prior(100 + i))

    def test_eviction_never_loses_data(self):
        evicting = TileStore(SPEC, directory=self.dir, capacity=2, clock=self.clock)
        reference = TileStore(SPEC, clock=self.clock)
        self.drive(evicting)
        self.drive(reference)
        self.assertLessEqual(evicting.resident_count, 12)
        self.assertEqual(evicting.keys(), reference.keys())
        for key in reference.keys():
            self.assertTrue(evicting.get_tile(key).same_content(reference.get_tile(key)))

    def test_only_written_tiles_reach_disk(self):
        store = TileStore(SPEC, directory=self.dir, capacity=4, clock=self.clock)
        self.drive(store, steps=3)
        store.query_region(lattice_pose(-5000, -5000))
        store.flush()
        on_disk = sorted(p.name for p in store.directory.glob("tile_*.nmpt"))
        self.assertEqual(on_disk, sorted(k.filename for k in store.keys()))

    def test_reopen_sees_flushed_tiles(self):
        store = TileStore(SPEC, directory=self.dir, clock=self.clock)
        store.write_back(lattice_pose(10, 10), random_prior(7))
        store.flush()
        reopened = TileStore(SPEC, directory=self.dir, clock=self.clock)
        self.assertEqual(reopened.keys(), store.keys())
        np.testing.assert_array_equal(
            reopened.query_region(lattice_pose(10, 10)).data,
            store.query_region(lattice_pose(10, 10)).data,
        )

    def test_memory_counts_only_resident_tiles(self):
        evicting = TileStore(SPEC, directory=self.dir, capacity=2, clock=self.clock)
        reference = TileStore(SPEC, clock=self.clock)
        self.drive(evicting)
        self.drive(reference)
        stats, full = evicting.memory_stats(), reference.memory_stats()
        self.assertLess(stats.resident_bytes, full.resident_bytes)
        self.assertGreater(stats.resident_bytes, 0)
        self.assertLessEqual(stats.tile_count, evicting.resident_count)
        self.assertEqual(stats.dense_equivalent_bytes, full.dense_equivalent_bytes)

    def test_io_failure_rolls_back(self):
        store = TileStore(SPEC, directory=self.dir, capacity=1, clock=self.clock)
        store.write_back(lattice_pose(8, 3), random_prior(8))
        before = store.keys()
        with mock.patch.object(store, "_persist", side_effect=StoreIOError("disk full")):
            with self.assertRaises(StoreIOError):
                store.write_back(lattice_pose(400, 400), random_prior(9))
        self.assertEqual(store.keys(), before)
        for key in before:
            self.assertEqual(store.get_tile(key).version, 1)


class ConcurrencyTests(SimpleTestCase):
    def test_disjoint_writers_both_survive(self):
        store = TileStore(SPEC, clock=FixedClock())
        errors = []

        def writer(offset):
            try:
                for i in range(100):
                    store.write_back(lattice_pose(offset, 0), FeatureMap.filled(20, 10, 4, float(i)))
            except Exception as e:
                errors.append(e)

        threads = [threading.Thread(target=writer, args=(k,)) for k in (8, 2008)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.assertEqual(errors, [])
        for offset in (8, 2008):
            np.testing.assert_array_equal(store.query_region(lattice_pose(offset, 0)).data, 99.0)

    def test_queries_on_one_pose_run_side_by_side(self):
        store = TileStore(SPEC, clock=FixedClock())
        pose = lattice_pose(8, 3)
        store.write_back(pose, random_prior(1))
        fetch = store._fetch
        barrier = threading.Barrier(4, timeout=5)
        guard = threading.Lock()
        state = {"inside": 0, "peak": 0}
        arrived = set()
        errors = []

        def counting_fetch(key):
            with guard:
                state["inside"] += 1
                state["peak"] = max(state["peak"], state["inside"])
                first = threading.get_ident() not in arrived
                arrived.add(threading.get_ident())
            try:
                if first:
                    barrier.wait()
                return fetch(key)
            finally:
                with guard:
                    state["inside"] -= 1

        def reader():
            try:
                store.query_region(pose)
            except Exception as e:
                errors.append(e)

        with mock.patch.object(store, "_fetch", side_effect=counting_fetch):
            threads = [threading.Thread(target=reader) for _ in range(4)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        self.assertEqual(errors, [])
        self.assertGreater(state["peak"], 1)

    def test_write_back_waits_for_readers(self):
        store = TileStore(SPEC, clock=FixedClock())
        pose = lattice_pose(8, 3)
        store.write_back(pose, FeatureMap.filled(20, 10, 4, 1.0))
        keys = sorted(store.keys())
        done = threading.Event()

        def writer():
            store.write_back(pose, FeatureMap.filled(20, 10, 4, 2.0))
            done.set()

        with store.locked(keys, shared=True):
            thread = threading.Thread(target=writer)
            thread.start()
            self.assertFalse(done.wait(0.2))
        thread.join(5)
        self.assertTrue(done.is_set())
        np.testing.assert_array_equal(store.query_region(pose).data, 2.0)

    def test_locks_do_not_outlive_their_users(self):
        store = TileStore(SPEC, clock=FixedClock())
        for i in range(30):
            store.write_back(lattice_pose(40 * i, 17 * i), random_prior(i))
            store.query_region(lattice_pose(40 * i, 17 * i))
        self.assertGreaterEqual(len(store.keys()), 30)
        self.assertEqual(store.lock_count, 0)
        with store.locked(store.keys()[:3]):
            self.assertEqual(store.lock_count, 3)
        self.assertEqual(store.lock_count, 0)


class ReadWriteLockTests(SimpleTestCase):
    def test_readers_share(self):
        lock = ReadWriteLock()
        lock.acquire_read()
        other = threading.Thread(target=lambda: (lock.acquire_read(), lock.release_read()))
        other.start()
        other.join(5)
        self.assertFalse(other.is_alive())
        lock.release_read()

    def test_writer_excludes_readers_and_writers(self):
        lock = ReadWriteLock()
        lock.acquire_read()
        self.assertFalse(lock.acquire_write(blocking=False))
        lock.release_read()
        self.assertTrue(lock.acquire_write(blocking=False))
        self.assertFalse(lock.acquire_write(blocking=False))
        lock.release_write()
