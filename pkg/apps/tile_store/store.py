"""
Sparse, persistent global prior.

Tiles live in an LRU table of at most `capacity` entries; dirty tiles are
written to `<directory>/tile_<ix>_<iy>.nmpt` before they leave the table.
Without a directory the store is purely in memory and never evicts.

Locking: one reader-writer lock per tile key, always taken in sorted key
order, then the table lock. Queries and tile reads share a key; write-back,
merges and resets take it exclusively. Eviction only takes victims whose
lock is free. A key's lock exists only while some thread holds or waits on
it.
"""
import logging
import os
import threading
import time
import weakref
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
from django.conf import settings

from apps.common.exceptions import ShapeError, StoreIOError, TileFormatError
from apps.geometry.grid import GridSpec, local_grid_coords
from apps.geometry.pose import EgoPose
from apps.geometry.sampling import bilinear_sample, bilinear_splat, continuous_index
from apps.tensor_core.feature_map import FeatureMap
from .codec import load_tile, save_tile
from .keys import TileKey
from .tile import MapTile

logger = logging.getLogger(__name__)


class ReadWriteLock:
    """Many readers or one writer; a waiting writer holds off new readers."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire_read(self) -> None:
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1

    def release_read(self) -> None:
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    def acquire_write(self, blocking: bool = True) -> bool:
        with self._cond:
            if not blocking:
                if self._writer or self._readers:
                    return False
                self._writer = True
                return True
            self._waiting_writers += 1
            try:
                while self._writer or self._readers:
                    self._cond.wait()
            finally:
                self._waiting_writers -= 1
            self._writer = True
            return True

    def release_write(self) -> None:
        with self._cond:
            self._writer = False
            self._cond.notify_all()


@dataclass(frozen=True)
class MemoryStats:
    resident_bytes: int
    dense_equivalent_bytes: int
    ratio: float
    tile_count: int

    def as_dict(self) -> dict:
        return {
            "resident_bytes": self.resident_bytes,
            "dense_equivalent_bytes": self.dense_equivalent_bytes,
            "ratio": self.ratio,
            "tile_count": self.tile_count,
        }


@dataclass(frozen=True)
class PutResult:
    stale: bool
    version: int


class TileStore:
    def __init__(self, spec: GridSpec, directory=None, capacity: Optional[int] = None,
                 min_weight: Optional[float] = None, clock: Callable[[], float] = time.time):
        self.spec = spec
        self.directory = Path(directory) if directory else None
        self.capacity = capacity or settings.NMP_STORE_CAPACITY
        self.min_weight = settings.NMP_SPLAT_MIN_WEIGHT if min_weight is None else min_weight
        self.clock = clock

        self._tiles: "OrderedDict[TileKey, MapTile]" = OrderedDict()
        self._dirty: Set[TileKey] = set()
        self._written: Dict[TileKey, int] = {}
        self._locks: "weakref.WeakValueDictionary[TileKey, ReadWriteLock]" = weakref.WeakValueDictionary()
        self._locks_guard = threading.Lock()
        self._table_lock = threading.RLock()

        if self.directory is not None:
            try:
                self.directory.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise StoreIOError(f"cannot create store directory {self.directory}: {e}")
            self._scan_directory()

    def __repr__(self):
        where = self.directory or "memory"
        return f"TileStore({where}, tiles={len(self._written)}, resident={len(self._tiles)})"

    # -------------------------------------------------
    # Locking
    # -------------------------------------------------
    def _lock_for(self, key: TileKey) -> ReadWriteLock:
        with self._locks_guard:
            lock = self._locks.get(key)
            if lock is None:
                lock = ReadWriteLock()
                self._locks[key] = lock
            return lock

    @property
    def lock_count(self) -> int:
        return len(self._locks)

    @contextmanager
    def locked(self, keys: Iterable[TileKey], shared: bool = False):
        ordered = sorted(set(keys))
        held = []
        try:
            for key in ordered:
                lock = self._lock_for(key)
                if shared:
                    lock.acquire_read()
                else:
                    lock.acquire_write()
                held.append(lock)
            yield ordered
        finally:
            for lock in reversed(held):
                if shared:
                    lock.release_read()
                else:
                    lock.release_write()

    # -------------------------------------------------
    # Persistence
    # -------------------------------------------------
    def _path(self, key: TileKey) -> Path:
        return self.directory / key.filename

    def _scan_directory(self) -> None:
        for path in sorted(self.directory.glob("tile_*.nmpt")):
            try:
                tile = load_tile(path.read_bytes())
            except (OSError, TileFormatError) as e:
                raise StoreIOError(f"cannot index {path}: {e}")
            self._written[tile.key] = tile.written_cells
        if self._written:
            logger.info(f"indexed {len(self._written)} tiles in {self.directory}")

    def _read(self, key: TileKey) -> Optional[MapTile]:
        if self.directory is None:
            return None
        path = self._path(key)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as e:
            raise StoreIOError(f"cannot read {path}: {e}")
        try:
            return load_tile(data)
        except TileFormatError as e:
            raise StoreIOError(f"corrupt tile file {path}: {e}")

    def _persist(self, tile: MapTile) -> None:
        path = self._path(tile.key)
        tmp = path.with_suffix(".tmp")
        try:
            tmp.write_bytes(save_tile(tile))
            os.replace(tmp, path)
        except OSError as e:
            raise StoreIOError(f"cannot write {path}: {e}")

    # -------------------------------------------------
    # Resident table (callers hold the tile lock)
    # -------------------------------------------------
    def _fetch(self, key: TileKey) -> Optional[MapTile]:
        with self._table_lock:
            tile = self._tiles.get(key)
            if tile is not None:
                self._tiles.move_to_end(key)
                return tile
        if key not in self._written:
            return None
        tile = self._read(key)
        if tile is not None:
            with self._table_lock:
                self._tiles[key] = tile
                self._evict()
        return tile

    def _evict(self) -> None:
        if self.directory is None:
            return
        while len(self._tiles) > self.capacity:
            victim = lock = None
            for key in self._tiles:
                candidate = self._lock_for(key)
                if candidate.acquire_write(blocking=False):
                    victim, lock = key, candidate
                    break
            if victim is None:
                return
            try:
                if victim in self._dirty:
                    self._persist(self._tiles[victim])
                    self._dirty.discard(victim)
                del self._tiles[victim]
                logger.debug(f"evicted tile {victim}")
            finally:
                lock.release_write()

    def _commit(self, tiles: List[MapTile], previous: Dict[TileKey, Optional[MapTile]]) -> None:
        with self._table_lock:
            was_dirty = {t.key: t.key in self._dirty for t in tiles}
            for tile in tiles:
                self._tiles[tile.key] = tile
                self._tiles.move_to_end(tile.key)
                self._dirty.add(tile.key)
                self._written[tile.key] = tile.written_cells
            try:
                self._evict()
            except StoreIOError:
                for tile in tiles:
                    old = previous.get(tile.key)
                    if old is None:
                        self._tiles.pop(tile.key, None)
                        self._written.pop(tile.key, None)
                        self._dirty.discard(tile.key)
                    else:
                        self._tiles[tile.key] = old
                        self._written[tile.key] = old.written_cells
                        if not was_dirty[tile.key]:
                            self._dirty.discard(tile.key)
                raise

    # -------------------------------------------------
    # Region operations
    # -------------------------------------------------
    def _cell_bounds(self, u: np.ndarray, v: np.ndarray) -> Tuple[int, int, int, int]:
        return (int(np.floor(u.min())), int(np.floor(v.min())),
                int(np.floor(u.max())) + 1, int(np.floor(v.max())) + 1)

    def _keys_for_cells(self, gx0: int, gy0: int, gx1: int, gy1: int) -> List[TileKey]:
        edge = self.spec.tile_edge
        return [
            TileKey(ix, iy)
            for ix in range(gx0 // edge, gx1 // edge + 1)
            for iy in range(gy0 // edge, gy1 // edge + 1)
        ]

    def query_region(self, pose: EgoPose) -> FeatureMap:
        """Prior features on the BEV lattice at `pose`, masked where the prior holds nothing."""
        coords = local_grid_coords(self.spec, pose)
        u, v = continuous_index(coords, self.spec.map_resolution)
        gx0, gy0, gx1, gy1 = self._cell_bounds(u, v)
        rows, cols = gx1 - gx0 + 1, gy1 - gy0 + 1
        data = np.zeros((rows, cols, self.spec.channels), dtype=np.float32)
        covered = np.zeros((rows, cols), dtype=bool)

        edge = self.spec.tile_edge
        with self.locked(self._keys_for_cells(gx0, gy0, gx1, gy1), shared=True) as keys:
            for key in keys:
                tile = self._fetch(key)
                if tile is None:
                    continue
                ox, oy = key.ix * edge, key.iy * edge
                x0, x1 = max(gx0, ox), min(gx1, ox + edge - 1)
                y0, y1 = max(gy0, oy), min(gy1, oy + edge - 1)
                if x0 > x1 or y0 > y1:
                    continue
                src = np.s_[x0 - ox:x1 - ox + 1, y0 - oy:y1 - oy + 1]
                dst = np.s_[x0 - gx0:x1 - gx0 + 1, y0 - gy0:y1 - gy0 + 1]
                data[dst] = tile.features[src]
                covered[dst] = tile.weight[src] > 0

        return bilinear_sample(FeatureMap(data, covered), (gx0, gy0), self.spec.map_resolution, coords)

    def write_back(self, pose: EgoPose, new_prior: FeatureMap) -> Set[TileKey]:
        """Splat `new_prior` into the map, replacing stored values; returns the touched tiles."""
        expected = (self.spec.bev_rows, self.spec.bev_cols, self.spec.channels)
        if new_prior.shape != expected:
            raise ShapeError(f"new prior {new_prior.shape} != BEV shape {expected}")
        if not new_prior.is_finite():
            raise ShapeError("new prior holds non-finite values")

        coords = local_grid_coords(self.spec, pose)
        splat = bilinear_splat(new_prior, coords, self.spec.map_resolution, self.min_weight)
        if len(splat) == 0:
            return set()

        edge = self.spec.tile_edge
        tx, ty = np.floor_divide(splat.gx, edge), np.floor_divide(splat.gy, edge)
        touched = {TileKey(int(a), int(b)) for a, b in np.unique(np.stack([tx, ty], axis=1), axis=0)}
        now = int(self.clock())

        with self.locked(touched) as keys:
            previous, updated = {}, []
            for key in keys:
                old = self._fetch(key)
                previous[key] = old
                tile = old.copy() if old is not None else MapTile.empty(key, edge, self.spec.channels)
                sel = (tx == key.ix) & (ty == key.iy)
                lx, ly = splat.gx[sel] - key.ix * edge, splat.gy[sel] - key.iy * edge
                tile.features[lx, ly] = splat.features[sel]
                tile.weight[lx, ly] = np.maximum(tile.weight[lx, ly], splat.weight[sel])
                tile.version += 1
                tile.traversal_count += 1
                tile.touch(now)
                updated.append(tile)
            self._commit(updated, previous)

        logger.debug(f"write_back at ({pose.x:.1f}, {pose.y:.1f}) touched {len(touched)} tiles")
        return set(touched)

    # -------------------------------------------------
    # Tile operations
    # -------------------------------------------------
    def keys(self) -> List[TileKey]:
        with self._table_lock:
            return sorted(self._written)

    def get_tile(self, key: TileKey) -> Optional[MapTile]:
        with self.locked([key], shared=True):
            tile = self._fetch(key)
            return tile.copy() if tile is not None else None

    def get_tiles(self, keys: Iterable[TileKey]) -> Dict[TileKey, Optional[MapTile]]:
        """Consistent snapshot of several tiles."""
        with self.locked(keys, shared=True) as ordered:
            out = {}
            for key in ordered:
                tile = self._fetch(key)
                out[key] = tile.copy() if tile is not None else None
            return out

    def put_tile(self, incoming: MapTile, known_version: int) -> PutResult:
        """
        Merge an uploaded tile. A current known_version replaces every cell the
        upload wrote; a stale one keeps per cell the heavier value (ties go to
        the upload). Weights never decrease.
        """
        self._check_tile(incoming)
        key = incoming.key
        with self.locked([key]):
            old = self._fetch(key)
            current = old.copy() if old is not None else MapTile.empty(key, self.spec.tile_edge, self.spec.channels)
            stale = known_version != current.version
            if incoming.is_empty:
                return PutResult(stale, current.version)

            if stale:
                take = (incoming.weight > 0) & (incoming.weight >= current.weight)
            else:
                take = incoming.weight > 0
            current.features[take] = incoming.features[take]
            current.weight = np.maximum(current.weight, incoming.weight)
            current.traversal_count = max(current.traversal_count, incoming.traversal_count)
            current.version = max(current.version + 1, current.traversal_count)
            current.last_updated = max(current.last_updated, incoming.last_updated)
            self._commit([current], {key: old})
            logger.debug(f"put tile {key} known={known_version} stale={stale} -> v{current.version}")
            return PutResult(stale, current.version)

    def install_tile(self, tile: MapTile) -> bool:
        """Cache a tile fetched from elsewhere; never replaces a newer local copy."""
        self._check_tile(tile)
        if tile.is_empty:
            return False
        with self.locked([tile.key]):
            old = self._fetch(tile.key)
            if old is not None and old.version >= tile.version:
                return False
            self._commit([tile.copy()], {tile.key: old})
            with self._table_lock:
                self._dirty.discard(tile.key)
            return True

    def _check_tile(self, tile: MapTile) -> None:
        if tile.edge != self.spec.tile_edge or tile.channels != self.spec.channels:
            raise ShapeError(
                f"tile {tile.key} is {tile.edge}x{tile.edge}x{tile.channels}, store expects "
                f"{self.spec.tile_edge}x{self.spec.tile_edge}x{self.spec.channels}"
            )

    # -------------------------------------------------
    # Lifecycle
    # -------------------------------------------------
    def flush(self) -> int:
        """Persist every dirty resident tile; returns how many were written."""
        if self.directory is None:
            return 0
        with self._table_lock:
            dirty = sorted(self._dirty)
        count = 0
        with self.locked(dirty):
            for key in dirty:
                with self._table_lock:
                    tile = self._tiles.get(key)
                if tile is None:
                    continue
                self._persist(tile)
                with self._table_lock:
                    self._dirty.discard(key)
                count += 1
        if count:
            logger.info(f"flushed {count} tiles to {self.directory}")
        return count

    def reset(self) -> None:
        """Drop every tile, on disk too."""
        with self._table_lock:
            keys = list(self._written)
        with self.locked(keys):
            with self._table_lock:
                self._tiles.clear()
                self._dirty.clear()
                self._written.clear()
            if self.directory is not None:
                for path in self.directory.glob("tile_*.nmpt"):
                    try:
                        path.unlink()
                    except OSError as e:
                        raise StoreIOError(f"cannot remove {path}: {e}")

    @property
    def resident_count(self) -> int:
        return len(self._tiles)

    def memory_stats(self) -> MemoryStats:
        """Bytes of written cells in resident tiles against the dense raster spanning every stored tile."""
        with self._table_lock:
            written = dict(self._written)
            resident_cells = sum(tile.written_cells for tile in self._tiles.values())
            resident_tiles = sum(1 for tile in self._tiles.values() if not tile.is_empty)
        channels, edge = self.spec.channels, self.spec.tile_edge
        keys = [k for k, n in written.items() if n > 0]
        resident = resident_cells * channels * 4
        if not keys:
            return MemoryStats(resident, 0, 0.0, 0)
        ix = [k.ix for k in keys]
        iy = [k.iy for k in keys]
        cells = (max(ix) - min(ix) + 1) * edge * (max(iy) - min(iy) + 1) * edge
        dense = cells * channels * 4
        return MemoryStats(resident, dense, resident / dense, resident_tiles)
