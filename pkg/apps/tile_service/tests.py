import itertools
import json
import threading
from wsgiref.util import setup_testing_defaults

import numpy as np
import requests
from django.test import SimpleTestCase

from apps.common.exceptions import ProtocolError, ServiceUnavailable
from apps.geometry.grid import GridSpec
from apps.geometry.pose import EgoPose
from apps.tensor_core.feature_map import FeatureMap
from apps.tile_store.keys import TileKey
from apps.tile_store.store import TileStore
from apps.tile_store.tile import MapTile
from . import protocol
from .cache import TileReadCache
from .client import EXCHANGE_PATH, TileClient
from .server import parse_address, serve
from .sync import VehicleTileSync
from .views import STORE_ENVIRON_KEY

SPEC = GridSpec(resolution=0.3, bev_rows=20, bev_cols=10, channels=2, tile_edge=8, patch_size=10)


def tile_with(key, weight, value, version=1):
    tile = MapTile.empty(key, SPEC.tile_edge, SPEC.channels)
    tile.weight[:] = weight
    tile.features[:] = np.where(np.asarray(tile.weight)[..., None] > 0, value, 0.0)
    tile.version = tile.traversal_count = version
    return tile


class ServiceTestCase(SimpleTestCase):
    def setUp(self):
        self.store = TileStore(SPEC, clock=lambda: 1_700_000_000)
        self.server = serve(self.store, "127.0.0.1:0")
        self.clients = []

    def tearDown(self):
        for client in self.clients:
            client.close()
        self.server.shutdown()

    def tile_client(self, name="v1"):
        client = TileClient(self.server.url, name, timeout=10)
        self.clients.append(client)
        return client


class TileServiceTests(ServiceTestCase):
    def test_missing_tile_is_empty_marker(self):
        tiles = self.tile_client().get_tiles((0, 0, 1, 0))
        self.assertEqual(tiles, {TileKey(0, 0): None, TileKey(1, 0): None})

    def test_put_then_get_roundtrip(self):
        client = self.tile_client()
        tile = tile_with(TileKey(-1, 2), 1.5, 0.25)
        result = client.put_tile(tile, known_version=0)
        self.assertFalse(result.stale)
        self.assertGreater(result.version, 0)
        got = client.get_tiles((-1, 2, -1, 2))[TileKey(-1, 2)]
        self.assertEqual(got.version, result.version)
        self.assertLessEqual(np.abs(got.features - tile.features).max(), 1e-6)
        self.assertTrue(got.same_content(self.store.get_tile(TileKey(-1, 2))))

    def test_reset_server_tile_is_not_served_from_cache(self):
        client = self.tile_client()
        key = TileKey(3, 3)
        client.put_tile(tile_with(key, 1.0, 0.5), known_version=0)
        self.assertIsNotNone(client.get_tiles((3, 3, 3, 3))[key])
        self.assertIsNotNone(client.cache.get(key))
        self.store.reset()
        self.assertEqual(client.get_tiles((3, 3, 3, 3)), {key: None})
        self.assertIsNone(client.cache.get(key))

    def test_current_put_increments_version(self):
        client = self.tile_client()
        v1 = client.put_tile(tile_with(TileKey(0, 0), 1.0, 1.0), 0).version
        result = client.put_tile(tile_with(TileKey(0, 0), 1.0, 2.0), v1)
        self.assertFalse(result.stale)
        self.assertEqual(result.version, v1 + 1)

    def test_stale_put_keeps_heavier_server_cell(self):
        client = self.tile_client()
        client.put_tile(tile_with(TileKey(0, 0), 3.0, 1.0), 0)
        result = client.put_tile(tile_with(TileKey(0, 0), 1.0, 9.0), 0)
        self.assertTrue(result.stale)
        np.testing.assert_array_equal(self.store.get_tile(TileKey(0, 0)).features, 1.0)

    def test_stats(self):
        client = self.tile_client()
        client.put_tile(tile_with(TileKey(0, 0), 1.0, 1.0), 0)
        stats = client.stats()
        self.assertEqual(stats.tile_count, 1)
        self.assertEqual(stats.ratio, 1.0)

    def test_malformed_frame_keeps_server_alive(self):
        reply = requests.post(
            self.server.url + EXCHANGE_PATH,
            data=b"\x05\x00\x00\x00\x7fjunk",
            headers={"Content-Type": protocol.FRAME_CONTENT_TYPE},
            timeout=10,
        )
        self.assertEqual(reply.status_code, 400)
        status, _ = protocol.unframe(reply.content)
        self.assertEqual(status, protocol.MALFORMED)
        self.assertEqual(self.tile_client().get_tiles((0, 0, 0, 0)), {TileKey(0, 0): None})

    def test_oversized_region_terminates_session(self):
        client = self.tile_client()
        with self.assertRaises(ProtocolError):
            client.get_tiles((0, 0, 100, 100))
        self.assertTrue(client.closed)
        with self.assertRaises(ProtocolError):
            client.stats()

    def test_concurrent_disjoint_puts_all_survive(self):
        errors = []

        def writer(name, key):
            client = TileClient(self.server.url, name, timeout=10)
            version = 0
            try:
                for i in range(100):
                    version = client.put_tile(tile_with(key, 1.0, float(i), version=i + 1), version).version
            except Exception as e:
                errors.append(e)
            finally:
                client.close()

        threads = [
            threading.Thread(target=writer, args=("a", TileKey(0, 0))),
            threading.Thread(target=writer, args=("b", TileKey(5, 5))),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.assertEqual(errors, [])
        for key in (TileKey(0, 0), TileKey(5, 5)):
            np.testing.assert_array_equal(self.store.get_tile(key).features, 99.0)

    def test_interleaved_writers_keep_max_weight(self):
        rng = np.random.default_rng(0)
        writes = {name: [rng.uniform(0, 4, size=(8, 8)) * (rng.random((8, 8)) < 0.7) for _ in range(15)]
                  for name in ("a", "b")}

        def writer(name):
            client = TileClient(self.server.url, name, timeout=10)
            try:
                for i, weight in enumerate(writes[name]):
                    client.put_tile(tile_with(TileKey(1, 1), weight, float(i)), known_version=0)
            finally:
                client.close()

        threads = [threading.Thread(target=writer, args=(n,)) for n in writes]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        expected = np.max(np.stack(writes["a"] + writes["b"]), axis=0).astype(np.float32)
        np.testing.assert_array_equal(self.store.get_tile(TileKey(1, 1)).weight, expected)

    def test_concurrent_puts_match_a_serial_order(self):
        key = TileKey(2, 2)
        rng = np.random.default_rng(1)
        uploads = [tile_with(key, rng.uniform(0, 3, size=(8, 8)), float(i + 1), version=i + 1) for i in range(3)]
        barrier = threading.Barrier(3)

        def writer(i):
            client = TileClient(self.server.url, f"w{i}", timeout=10)
            try:
                barrier.wait()
                client.put_tile(uploads[i], known_version=0)
            finally:
                client.close()

        threads = [threading.Thread(target=writer, args=(i,)) for i in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        final = self.store.get_tile(key)

        outcomes = []
        for order in itertools.permutations(range(3)):
            serial = TileStore(SPEC, clock=lambda: 1_700_000_000)
            for i in order:
                serial.put_tile(uploads[i], known_version=0)
            outcomes.append(serial.get_tile(key))
        self.assertTrue(any(final.same_content(o) for o in outcomes))


class WsgiEntryTests(SimpleTestCase):
    def test_health_through_gunicorn_entry(self):
        from config.wsgi import application

        store = TileStore(SPEC)
        store.put_tile(tile_with(TileKey(0, 0), 1.0, 0.5), known_version=0)
        environ = {"REQUEST_METHOD": "GET", "PATH_INFO": "/api/nmp/health/", STORE_ENVIRON_KEY: store}
        setup_testing_defaults(environ)
        statuses = []
        body = b"".join(application(environ, lambda status, headers, exc_info=None: statuses.append(status)))
        self.assertEqual(statuses, ["200 OK"])
        self.assertEqual(json.loads(body), {"status": "ok", "tiles": 1})


class ClientFailureTests(SimpleTestCase):
    def test_unreachable_service_is_retryable(self):
        store = TileStore(SPEC)
        server = serve(store, "127.0.0.1:0")
        url = server.url
        server.shutdown()
        client = TileClient(url, "v", timeout=2)
        with self.assertRaises(ServiceUnavailable) as ctx:
            client.stats()
        self.assertTrue(ctx.exception.retryable)
        client.close()

    def test_parse_address(self):
        self.assertEqual(parse_address("0.0.0.0:9000"), ("0.0.0.0", 9000))
        self.assertEqual(parse_address("[::1]:80"), ("::1", 80))


class ProtocolTests(SimpleTestCase):
    def test_request_frame_layout(self):
        request = protocol.TileRequest(protocol.GET_TILES, 7, "ab", region=(-1, 0, 2, 3))
        data = protocol.encode_request(request)
        self.assertEqual(int.from_bytes(data[:4], "little"), len(data) - 4)
        self.assertEqual(data[4], protocol.GET_TILES)
        decoded = protocol.decode_request(data)
        self.assertEqual((decoded.correlation_id, decoded.client_id, decoded.region), (7, "ab", (-1, 0, 2, 3)))

    def test_inverted_region_rejected(self):
        data = protocol.encode_request(protocol.TileRequest(protocol.GET_TILES, 1, "x", region=(3, 0, 2, 0)))
        with self.assertRaises(protocol.FrameError):
            protocol.decode_request(data)

    def test_wrong_length_prefix(self):
        data = bytearray(protocol.encode_request(protocol.TileRequest(protocol.STATS, 1, "x")))
        data[0] += 1
        with self.assertRaises(protocol.FrameError):
            protocol.decode_request(bytes(data))


class ReadCacheTests(SimpleTestCase):
    def test_never_downgrades(self):
        cache = TileReadCache("cache-test")
        cache.offer(tile_with(TileKey(0, 0), 1.0, 5.0, version=5))
        kept = cache.offer(tile_with(TileKey(0, 0), 1.0, 3.0, version=3))
        self.assertEqual(kept.version, 5)
        self.assertEqual(cache.get(TileKey(0, 0)).version, 5)
        cache.clear(TileKey(0, 0))


class VehicleSyncTests(ServiceTestCase):
    def test_second_vehicle_sees_first_vehicles_prior(self):
        pose = EgoPose(0.3 * 40, 0.3 * 12, 0.0)
        written = FeatureMap(np.random.default_rng(2).normal(size=(20, 10, 2)).astype(np.float32))

        first = VehicleTileSync(SPEC, self.server.url, "car-1")
        self.assertFalse(first.query_region(pose).coverage.any())
        first.write_back(pose, written)
        self.assertGreater(first.finish(), 0)
        first.close()

        second = VehicleTileSync(SPEC, self.server.url, "car-2")
        prior = second.query_region(pose)
        second.close()
        self.assertTrue(prior.coverage.all())
        np.testing.assert_array_equal(prior.data, written.data)
