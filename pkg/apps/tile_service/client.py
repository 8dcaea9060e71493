import itertools
import logging
import uuid
from typing import Dict, Optional

import requests
from django.conf import settings

from apps.common.exceptions import ProtocolError, ServiceUnavailable
from apps.tile_store.keys import TileKey
from apps.tile_store.store import MemoryStats, PutResult
from apps.tile_store.tile import MapTile
from . import protocol
from .cache import TileReadCache
from .protocol import FRAME_CONTENT_TYPE, Region, TileRequest

logger = logging.getLogger(__name__)

EXCHANGE_PATH = "/api/nmp/tiles/exchange/"


class TileClient:
    """
    One vehicle's session with the tile service. Not shareable across threads.

    Network failures raise ServiceUnavailable (retryable); a protocol
    violation closes the session and raises ProtocolError.
    """

    def __init__(self, base_url: Optional[str] = None, client_id: str = "vehicle",
                 timeout: Optional[float] = None, use_cache: bool = True):
        base_url = base_url or f"http://{settings.NMP_ADDR}"
        if "://" not in base_url:
            base_url = f"http://{base_url}"
        self.url = base_url.rstrip("/") + EXCHANGE_PATH
        self.client_id = client_id
        self.timeout = timeout or settings.NMP_SERVICE_TIMEOUT
        self.cache = TileReadCache(f"{client_id}:{uuid.uuid4().hex[:12]}") if use_cache else None
        self._session: Optional[requests.Session] = requests.Session()
        self._ids = itertools.count(1)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def closed(self) -> bool:
        return self._session is None

    def close(self) -> None:
        if self._session is not None:
            self._session.close()
            self._session = None

    def _exchange(self, request: TileRequest) -> protocol.TileResponse:
        if self._session is None:
            raise ProtocolError("session is closed")
        try:
            reply = self._session.post(
                self.url,
                data=protocol.encode_request(request),
                headers={"Content-Type": FRAME_CONTENT_TYPE},
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise ServiceUnavailable(f"tile service at {self.url} unreachable: {e}")

        try:
            if reply.status_code not in (200, 400):
                raise ProtocolError(f"unexpected HTTP {reply.status_code}")
            response = protocol.decode_response(reply.content, request.op)
            if response.correlation_id != request.correlation_id:
                raise ProtocolError(
                    f"correlation id {response.correlation_id} != {request.correlation_id}"
                )
            if response.status == protocol.MALFORMED:
                raise ProtocolError(f"server rejected request: {response.message}")
        except ProtocolError:
            self.close()
            raise
        return response

    def get_tiles(self, region: Region) -> Dict[TileKey, Optional[MapTile]]:
        """Tiles in the inclusive region; None marks an empty tile."""
        response = self._exchange(
            TileRequest(protocol.GET_TILES, next(self._ids), self.client_id, region=tuple(region))
        )
        tiles = response.tiles
        if self.cache is not None:
            for key, tile in tiles.items():
                if tile is not None:
                    tiles[key] = self.cache.offer(tile)
                else:
                    # the server dropped it; a cached copy would resurrect it
                    self.cache.clear(key)
        return tiles

    def put_tile(self, tile: MapTile, known_version: int) -> PutResult:
        response = self._exchange(
            TileRequest(protocol.PUT_TILE, next(self._ids), self.client_id,
                        tile=tile, known_version=known_version)
        )
        return PutResult(response.status == protocol.STALE_MERGED, response.version)

    def stats(self) -> MemoryStats:
        response = self._exchange(TileRequest(protocol.STATS, next(self._ids), self.client_id))
        resident, dense, ratio, count = response.stats
        return MemoryStats(resident, dense, ratio, count)


def client_get(client: TileClient, region: Region):
    return client.get_tiles(region)


def client_put(client: TileClient, tile: MapTile, known_version: int) -> int:
    return client.put_tile(tile, known_version).version
