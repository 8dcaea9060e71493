"""
Vehicle side of fleet sync: tiles are downloaded on demand into a local
in-memory store and refined tiles are uploaded asynchronously.
"""
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Dict, List, Optional, Set

import numpy as np

from apps.common.exceptions import ServiceUnavailable
from apps.geometry.grid import GridSpec, local_grid_coords
from apps.geometry.pose import EgoPose
from apps.geometry.sampling import continuous_index
from apps.tensor_core.feature_map import FeatureMap
from apps.tile_store.keys import TileKey
from apps.tile_store.store import TileStore
from .client import TileClient

logger = logging.getLogger(__name__)

UPLOAD_ATTEMPTS = 3
RETRY_DELAY_S = 0.2


class VehicleTileSync:
    """
    Presents query_region / write_back like a TileStore, backed by the tile service.

    Tiles fetched once stay authoritative locally until finish(), which waits
    for pending uploads and drops the local copy.
    """

    def __init__(self, spec: GridSpec, base_url: Optional[str] = None, client_id: str = "vehicle"):
        self.spec = spec
        self.client_id = client_id
        self.local = TileStore(spec)
        self._reader = TileClient(base_url, client_id)
        self._uploader = TileClient(base_url, f"{client_id}-up", use_cache=False)
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"nmp-up-{client_id}")
        self._pending: List[Future] = []
        self._fetched: Set[TileKey] = set()
        self._base_versions: Dict[TileKey, int] = {}

    def _region_for(self, pose: EgoPose):
        u, v = continuous_index(local_grid_coords(self.spec, pose), self.spec.map_resolution)
        edge = self.spec.tile_edge
        return (
            int(np.floor(u.min())) // edge,
            int(np.floor(v.min())) // edge,
            (int(np.floor(u.max())) + 1) // edge,
            (int(np.floor(v.max())) + 1) // edge,
        )

    def prefetch(self, pose: EgoPose) -> int:
        """Download tiles around `pose` not fetched yet; returns how many were installed."""
        ix0, iy0, ix1, iy1 = self._region_for(pose)
        missing = [
            TileKey(ix, iy)
            for ix in range(ix0, ix1 + 1)
            for iy in range(iy0, iy1 + 1)
            if TileKey(ix, iy) not in self._fetched
        ]
        if not missing:
            return 0
        region = (
            min(k.ix for k in missing), min(k.iy for k in missing),
            max(k.ix for k in missing), max(k.iy for k in missing),
        )
        installed = 0
        for key, tile in self._reader.get_tiles(region).items():
            if key in self._fetched:
                continue
            self._fetched.add(key)
            if tile is None:
                self._base_versions.setdefault(key, 0)
                continue
            self._base_versions[key] = tile.version
            installed += int(self.local.install_tile(tile))
        return installed

    def query_region(self, pose: EgoPose) -> FeatureMap:
        self.prefetch(pose)
        return self.local.query_region(pose)

    def write_back(self, pose: EgoPose, new_prior: FeatureMap) -> Set[TileKey]:
        self.prefetch(pose)
        touched = self.local.write_back(pose, new_prior)
        for key in sorted(touched):
            snapshot = self.local.get_tile(key)
            self._pending.append(self._executor.submit(self._upload, snapshot))
        return touched

    def _upload(self, tile) -> int:
        base = self._base_versions.get(tile.key, 0)
        for attempt in range(1, UPLOAD_ATTEMPTS + 1):
            try:
                result = self._uploader.put_tile(tile, base)
                break
            except ServiceUnavailable as e:
                if attempt == UPLOAD_ATTEMPTS:
                    raise
                logger.warning(f"upload of {tile.key} failed (attempt {attempt}): {e}")
                time.sleep(RETRY_DELAY_S * attempt)
        self._base_versions[tile.key] = result.version
        return result.version

    def finish(self) -> int:
        """Wait for pending uploads, then forget local state. Re-raises the first upload error."""
        pending, self._pending = self._pending, []
        errors = []
        for future in pending:
            try:
                future.result()
            except Exception as e:
                errors.append(e)
        self.local.reset()
        self._fetched.clear()
        if errors:
            raise errors[0]
        logger.debug(f"{self.client_id} uploaded {len(pending)} tiles")
        return len(pending)

    def close(self) -> None:
        try:
            self.finish()
        finally:
            self._executor.shutdown(wait=True)
            self._reader.close()
            self._uploader.close()
