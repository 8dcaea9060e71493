"""
Binary tile format.

Header (little-endian, 38 bytes): magic "NMPT", format version u16, edge u16,
channels u16, ix i32, iy i32, version u64, traversal_count u32,
last_updated i64. Then payload length u32, payload, CRC32C(payload) u32.

Payload walks cells in row-major order as runs:
  0x00 + u16 n                      n unwritten cells
  0x01 + u16 n + n * (1 + C) * f32  n written cells as (weight, features...)
Runs are split at 65535 cells.
"""
import struct

import crc32c
import numpy as np

from apps.common.exceptions import TileFormatError
from .keys import TileKey
from .tile import MapTile

MAGIC = b"NMPT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHHiiQIq")
LENGTH = struct.Struct("<I")
RUN = struct.Struct("<BH")
ZERO_RUN = 0x00
LITERAL_RUN = 0x01
MAX_RUN = 0xFFFF


def _runs(mask: np.ndarray):
    """(start, length, written) over a flat boolean mask."""
    if mask.size == 0:
        return
    edges = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [mask.size]])
    for start, end in zip(starts, ends):
        written = bool(mask[start])
        for chunk in range(int(start), int(end), MAX_RUN):
            yield chunk, min(MAX_RUN, int(end) - chunk), written


def encode_payload(tile: MapTile) -> bytes:
    weight = tile.weight.reshape(-1)
    cells = np.concatenate([weight[:, None], tile.features.reshape(weight.size, -1)], axis=1)
    out = bytearray()
    for start, length, written in _runs(weight > 0):
        if written:
            out += RUN.pack(LITERAL_RUN, length)
            out += cells[start:start + length].astype("<f4").tobytes()
        else:
            out += RUN.pack(ZERO_RUN, length)
    return bytes(out)


def save_tile(tile: MapTile) -> bytes:
    payload = encode_payload(tile)
    header = HEADER.pack(
        MAGIC, FORMAT_VERSION, tile.edge, tile.channels, tile.key.ix, tile.key.iy,
        tile.version, tile.traversal_count, tile.last_updated,
    )
    return header + LENGTH.pack(len(payload)) + payload + LENGTH.pack(crc32c.crc32c(payload))


def _decode_payload(payload: bytes, base: int, edge: int, channels: int):
    total = edge * edge
    weight = np.zeros(total, dtype=np.float32)
    features = np.zeros((total, channels), dtype=np.float32)
    cell, pos = 0, 0
    literal_size = 4 * (1 + channels)
    while pos < len(payload):
        if pos + RUN.size > len(payload):
            raise TileFormatError("truncated run header", base + pos)
        tag, length = RUN.unpack_from(payload, pos)
        if tag not in (ZERO_RUN, LITERAL_RUN):
            raise TileFormatError(f"unknown run tag 0x{tag:02x}", base + pos)
        if length == 0 or cell + length > total:
            raise TileFormatError(f"run of {length} cells overflows the tile", base + pos)
        pos += RUN.size
        if tag == LITERAL_RUN:
            end = pos + length * literal_size
            if end > len(payload):
                raise TileFormatError("truncated literal run", base + pos)
            block = np.frombuffer(payload[pos:end], dtype="<f4").reshape(length, 1 + channels)
            weight[cell:cell + length] = block[:, 0]
            features[cell:cell + length] = block[:, 1:]
            pos = end
        cell += length
    if cell != total:
        raise TileFormatError(f"payload covers {cell} of {total} cells", base + pos)
    return weight.reshape(edge, edge), features.reshape(edge, edge, channels)


def load_tile(data: bytes) -> MapTile:
    if len(data) < HEADER.size:
        raise TileFormatError("truncated header", len(data))
    magic, fmt, edge, channels, ix, iy, version, traversals, last_updated = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TileFormatError(f"bad magic {magic!r}", 0)
    if fmt != FORMAT_VERSION:
        raise TileFormatError(f"unsupported format version {fmt}", 4)
    if edge == 0 or channels == 0:
        raise TileFormatError(f"degenerate tile {edge}x{edge}x{channels}", 6)

    offset = HEADER.size
    if len(data) < offset + LENGTH.size:
        raise TileFormatError("truncated payload length", offset)
    (length,) = LENGTH.unpack_from(data, offset)
    offset += LENGTH.size
    end = offset + length
    if len(data) < end + LENGTH.size:
        raise TileFormatError("truncated payload", len(data))
    if len(data) > end + LENGTH.size:
        raise TileFormatError("trailing bytes after checksum", end + LENGTH.size)
    payload = data[offset:end]
    (expected,) = LENGTH.unpack_from(data, end)
    if crc32c.crc32c(payload) != expected:
        raise TileFormatError("payload checksum mismatch", end)

    weight, features = _decode_payload(payload, offset, edge, channels)
    if not np.isfinite(features).all() or not np.isfinite(weight).all() or (weight < 0).any():
        raise TileFormatError("non-finite or negative cell values", offset)
    return MapTile(TileKey(ix, iy), features, weight, version, traversals, last_updated)


def describe(data: bytes) -> dict:
    """Header fields and sizes, for inspection."""
    tile = load_tile(data)
    (length,) = LENGTH.unpack_from(data, HEADER.size)
    return {
        "key": [tile.key.ix, tile.key.iy],
        "format_version": FORMAT_VERSION,
        "edge": tile.edge,
        "channels": tile.channels,
        "version": tile.version,
        "traversal_count": tile.traversal_count,
        "last_updated": tile.last_updated,
        "written_cells": tile.written_cells,
        "payload_bytes": length,
        "file_bytes": len(data),
    }
