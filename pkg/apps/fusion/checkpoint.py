"""
NMPW weight checkpoints.

Little-endian: magic "NMPW", version u16, section count u16, then per
section: name (u16 length + UTF-8), ndim u8, dims u32 each, float32 payload.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from apps.common.exceptions import CheckpointFormatError, StoreIOError
from .weights import AttentionWeights, FusionWeights, GruWeights, PositionalEmbeddings

logger = logging.getLogger(__name__)

MAGIC = b"NMPW"
FORMAT_VERSION = 1


def sections_of(weights: FusionWeights) -> Dict[str, np.ndarray]:
    sections = {f"gru.{k}": v for k, v in weights.gru.blocks().items()}
    if weights.attention is not None:
        att = weights.attention
        sections["attention.meta"] = np.array([att.patch_size, att.heads], dtype=np.float32)
        sections.update({f"attention.{k}": v for k, v in att.blocks().items()})
    if weights.pe is not None:
        sections["pe.prior"] = weights.pe.pe_prior
        sections["pe.current"] = weights.pe.pe_current
    if weights.embedding is not None:
        sections["embedding"] = weights.embedding
    return sections


def encode_weights(weights: FusionWeights) -> bytes:
    sections = sections_of(weights)
    out = bytearray(MAGIC)
    out += struct.pack("<HH", FORMAT_VERSION, len(sections))
    for name, array in sections.items():
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", array.ndim)
        out += struct.pack(f"<{array.ndim}I", *array.shape)
        out += np.ascontiguousarray(array, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointFormatError("truncated checkpoint", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(data: bytes) -> FusionWeights:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, count = reader.unpack("<HH")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4)

    sections: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        start = reader.offset
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("section name is not UTF-8", start)
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        payload = reader.take(4 * size)
        sections[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if reader.offset != len(data):
        raise CheckpointFormatError("trailing bytes after last section", reader.offset)

    try:
        return _assemble(sections)
    except KeyError as e:
        raise CheckpointFormatError(f"missing section {e}", reader.offset)
    except (ValueError, TypeError, IndexError, OverflowError) as e:
        # ShapeError and ConfigurationError from the block checks land here too
        raise CheckpointFormatError(f"inconsistent sections: {e}", reader.offset)


def _assemble(sections: Dict[str, np.ndarray]) -> FusionWeights:
    gru = GruWeights(**{k: sections[f"gru.{k}"] for k in GruWeights.BLOCKS})
    attention = None
    if "attention.meta" in sections:
        patch_size, heads = (int(v) for v in sections["attention.meta"])
        attention = AttentionWeights(
            patch_size=patch_size,
            heads=heads,
            **{k: sections[f"attention.{k}"] for k in AttentionWeights.BLOCKS},
        )
    pe = None
    if "pe.prior" in sections:
        pe = PositionalEmbeddings(sections["pe.prior"], sections["pe.current"])
    return FusionWeights(gru=gru, attention=attention, pe=pe, embedding=sections.get("embedding"))


def save_weights(weights: FusionWeights, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_weights(weights))
    except OSError as e:
        raise StoreIOError(f"cannot write checkpoint {path}: {e}")
    logger.info(f"wrote weight checkpoint {path}")


def load_weights(path: Union[str, Path]) -> FusionWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StoreIOError(f"cannot read checkpoint {path}: {e}")
    return decode_weights(data)
