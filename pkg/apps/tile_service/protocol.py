"""
Tile exchange frames.

Frame: u32 length of what follows, u8 op code (requests) or status
(responses), payload. All integers little-endian.

Request payload:  correlation id u32, client id (u16 length + UTF-8), body.
Response payload: correlation id u32, body.

GET_TILES  body: ix_min, iy_min, ix_max, iy_max (i32, inclusive)
           reply: count u32, then per tile ix i32, iy i32, entry u8
                  (OK + u32 length + tile file bytes | EMPTY)
PUT_TILE   body: known_version u64 + tile file bytes
           reply: new version u64 (status OK or STALE_MERGED)
STATS      body: empty
           reply: resident u64, dense u64, ratio f64, tiles u32
MALFORMED  reply: message (u16 length + UTF-8)
"""
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from apps.common.exceptions import ProtocolError, TileFormatError
from apps.tile_store.codec import load_tile, save_tile
from apps.tile_store.keys import TileKey
from apps.tile_store.tile import MapTile

FRAME_CONTENT_TYPE = "application/x-nmp-frame"

GET_TILES = 0x01
PUT_TILE = 0x02
STATS = 0x03
OPS = {GET_TILES: "GET_TILES", PUT_TILE: "PUT_TILE", STATS: "STATS"}

OK = 0x00
EMPTY = 0x01
STALE_MERGED = 0x02
MALFORMED = 0x10

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_BOUNDS = struct.Struct("<iiii")
_ENTRY = struct.Struct("<iiB")
_STATS = struct.Struct("<QQdI")

Region = Tuple[int, int, int, int]


class FrameError(ValueError):
    """Bytes that do not form a valid frame; answered with MALFORMED."""


@dataclass
class TileRequest:
    op: int
    correlation_id: int
    client_id: str = ""
    region: Optional[Region] = None
    tile: Optional[MapTile] = None
    known_version: int = 0


@dataclass
class TileResponse:
    status: int
    correlation_id: int
    tiles: Dict[TileKey, Optional[MapTile]] = field(default_factory=dict)
    version: Optional[int] = None
    stats: Optional[Tuple[int, int, float, int]] = None
    message: str = ""


def region_keys(region: Region):
    ix_min, iy_min, ix_max, iy_max = region
    return [TileKey(ix, iy) for ix in range(ix_min, ix_max + 1) for iy in range(iy_min, iy_max + 1)]


def region_size(region: Region) -> int:
    ix_min, iy_min, ix_max, iy_max = region
    return (ix_max - ix_min + 1) * (iy_max - iy_min + 1)


def frame(code: int, payload: bytes) -> bytes:
    return _U32.pack(1 + len(payload)) + _U8.pack(code) + payload


def unframe(data: bytes) -> Tuple[int, bytes]:
    if len(data) < _U32.size + 1:
        raise FrameError(f"frame of {len(data)} bytes is shorter than its header")
    (length,) = _U32.unpack_from(data, 0)
    if length != len(data) - _U32.size:
        raise FrameError(f"length prefix {length} does not match {len(data) - _U32.size} bytes")
    return data[_U32.size], data[_U32.size + 1:]


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, s: struct.Struct):
        if self.pos + s.size > len(self.data):
            raise FrameError(f"truncated payload at byte {self.pos}")
        values = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return values

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FrameError(f"truncated payload at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def rest(self) -> bytes:
        chunk = self.data[self.pos:]
        self.pos = len(self.data)
        return chunk

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FrameError(f"{len(self.data) - self.pos} trailing bytes")


def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def _parse_tile(raw: bytes) -> MapTile:
    try:
        return load_tile(raw)
    except TileFormatError as e:
        raise FrameError(f"bad tile: {e}")


# -------------------------------------------------
# Requests
# -------------------------------------------------
def encode_request(request: TileRequest) -> bytes:
    payload = _U32.pack(request.correlation_id) + _text(request.client_id)
    if request.op == GET_TILES:
        payload += _BOUNDS.pack(*request.region)
    elif request.op == PUT_TILE:
        payload += _U64.pack(request.known_version) + save_tile(request.tile)
    elif request.op != STATS:
        raise ProtocolError(f"unknown op code 0x{request.op:02x}")
    return frame(request.op, payload)


def decode_request(data: bytes) -> TileRequest:
    op, payload = unframe(data)
    if op not in OPS:
        raise FrameError(f"unknown op code 0x{op:02x}")
    cur = _Cursor(payload)
    (correlation_id,) = cur.read(_U32)
    (name_len,) = cur.read(_U16)
    try:
        client_id = cur.take(name_len).decode("utf-8")
    except UnicodeDecodeError:
        raise FrameError("client id is not UTF-8")

    request = TileRequest(op, correlation_id, client_id)
    if op == GET_TILES:
        region = cur.read(_BOUNDS)
        if region[0] > region[2] or region[1] > region[3]:
            raise FrameError(f"inverted region {region}")
        request.region = region
    elif op == PUT_TILE:
        (request.known_version,) = cur.read(_U64)
        request.tile = _parse_tile(cur.rest())
    cur.done()
    return request


def peek_correlation_id(data: bytes) -> int:
    """Best effort, for answering frames that fail to decode."""
    if len(data) >= _U32.size + 1 + _U32.size:
        return _U32.unpack_from(data, _U32.size + 1)[0]
    return 0


# -------------------------------------------------
# Responses
# -------------------------------------------------
def encode_response(response: TileResponse, op: Optional[int] = None) -> bytes:
    payload = _U32.pack(response.correlation_id)
    if response.status == MALFORMED:
        payload += _text(response.message)
    elif op == GET_TILES:
        payload += _U32.pack(len(response.tiles))
        for key in sorted(response.tiles):
            tile = response.tiles[key]
            if tile is None:
                payload += _ENTRY.pack(key.ix, key.iy, EMPTY)
            else:
                raw = save_tile(tile)
                payload += _ENTRY.pack(key.ix, key.iy, OK) + _U32.pack(len(raw)) + raw
    elif op == PUT_TILE:
        payload += _U64.pack(response.version)
    elif op == STATS:
        payload += _STATS.pack(*response.stats)
    return frame(response.status, payload)


def decode_response(data: bytes, op: int) -> TileResponse:
    try:
        status, payload = unframe(data)
        cur = _Cursor(payload)
        (correlation_id,) = cur.read(_U32)
        response = TileResponse(status, correlation_id)
        if status == MALFORMED:
            (n,) = cur.read(_U16)
            response.message = cur.take(n).decode("utf-8", errors="replace")
        elif op == GET_TILES and status == OK:
            (count,) = cur.read(_U32)
            for _ in range(count):
                ix, iy, entry = cur.read(_ENTRY)
                key = TileKey(ix, iy)
                if entry == EMPTY:
                    response.tiles[key] = None
                elif entry == OK:
                    (n,) = cur.read(_U32)
                    tile = _parse_tile(cur.take(n))
                    if tile.key != key:
                        raise FrameError(f"entry {key} carries tile {tile.key}")
                    response.tiles[key] = tile
                else:
                    raise FrameError(f"unknown entry status 0x{entry:02x}")
        elif op == PUT_TILE and status in (OK, STALE_MERGED):
            (response.version,) = cur.read(_U64)
        elif op == STATS and status == OK:
            response.stats = cur.read(_STATS)
        else:
            raise FrameError(f"unexpected status 0x{status:02x} for {OPS.get(op, op)}")
        cur.done()
        return response
    except FrameError as e:
        raise ProtocolError(f"bad response frame: {e}")
