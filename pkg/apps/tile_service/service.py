import logging
from typing import Optional, Tuple

from django.conf import settings

from apps.common.exceptions import ShapeError
from apps.geometry.grid import GridSpec
from apps.tile_store.store import TileStore
from . import protocol
from .protocol import FrameError, TileResponse

logger = logging.getLogger(__name__)

_TILE_STORE: Optional[TileStore] = None


def get_tile_store() -> TileStore:
    global _TILE_STORE
    if _TILE_STORE is None:
        _TILE_STORE = TileStore(GridSpec.from_settings(), directory=settings.NMP_STORE_DIR)
    return _TILE_STORE


def set_tile_store(store: Optional[TileStore]) -> None:
    global _TILE_STORE
    _TILE_STORE = store


def _malformed(correlation_id: int, message: str) -> Tuple[bytes, int]:
    logger.warning(f"malformed frame (correlation {correlation_id}): {message}")
    response = TileResponse(protocol.MALFORMED, correlation_id, message=message[:1000])
    return protocol.encode_response(response), 400


def handle_frame(store: TileStore, data: bytes, max_region_tiles: Optional[int] = None) -> Tuple[bytes, int]:
    """Process one request frame against `store`; returns (response frame, HTTP status)."""
    max_region_tiles = max_region_tiles or settings.NMP_MAX_REGION_TILES
    try:
        request = protocol.decode_request(data)
    except FrameError as e:
        return _malformed(protocol.peek_correlation_id(data), str(e))

    cid = request.correlation_id
    if request.op == protocol.GET_TILES:
        size = protocol.region_size(request.region)
        if size > max_region_tiles:
            return _malformed(cid, f"region of {size} tiles exceeds limit {max_region_tiles}")
        tiles = store.get_tiles(protocol.region_keys(request.region))
        response = TileResponse(protocol.OK, cid, tiles=tiles)
        logger.debug(f"{request.client_id} GET {request.region}: {sum(t is not None for t in tiles.values())} tiles")

    elif request.op == protocol.PUT_TILE:
        try:
            result = store.put_tile(request.tile, request.known_version)
        except ShapeError as e:
            return _malformed(cid, str(e))
        status = protocol.STALE_MERGED if result.stale else protocol.OK
        response = TileResponse(status, cid, version=result.version)
        logger.debug(f"{request.client_id} PUT {request.tile.key} known={request.known_version} -> v{result.version}")

    else:
        stats = store.memory_stats()
        response = TileResponse(
            protocol.OK, cid,
            stats=(stats.resident_bytes, stats.dense_equivalent_bytes, stats.ratio, stats.tile_count),
        )

    return protocol.encode_response(response, request.op), 200
