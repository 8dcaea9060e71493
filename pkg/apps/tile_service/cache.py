from typing import Optional

from django.conf import settings
from django.core.cache import cache

from apps.common.exceptions import TileFormatError
from apps.tile_store.codec import load_tile, save_tile
from apps.tile_store.keys import TileKey
from apps.tile_store.tile import MapTile


def tile_cache_key(namespace: str, key: TileKey) -> str:
    return f"nmp:tile:{namespace}:{key.ix}:{key.iy}"


class TileReadCache:
    """
    Read-only tile cache of one vehicle client, kept in Django's cache.
    A cached tile is never replaced by an older version.
    """

    def __init__(self, namespace: str, timeout: Optional[int] = None):
        self.namespace = namespace
        self.timeout = settings.NMP_TILE_CACHE_TIMEOUT if timeout is None else timeout

    def get(self, key: TileKey) -> Optional[MapTile]:
        raw = cache.get(tile_cache_key(self.namespace, key))
        if raw is None:
            return None
        try:
            return load_tile(raw)
        except TileFormatError:
            cache.delete(tile_cache_key(self.namespace, key))
            return None

    def version(self, key: TileKey) -> int:
        tile = self.get(key)
        return tile.version if tile is not None else 0

    def offer(self, tile: MapTile) -> MapTile:
        """Keep the newer of `tile` and the cached copy; returns the one kept."""
        cached = self.get(tile.key)
        if cached is not None and cached.version > tile.version:
            return cached
        cache.set(tile_cache_key(self.namespace, tile.key), save_tile(tile), self.timeout)
        return tile

    def clear(self, key: TileKey) -> None:
        cache.delete(tile_cache_key(self.namespace, key))
