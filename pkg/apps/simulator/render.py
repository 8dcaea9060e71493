"""
PNG output for semantic maps, gate maps and decoded prior tiles.
"""
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from apps.common.exceptions import ShapeError, StoreIOError
from apps.tensor_core.feature_map import FeatureMap
from apps.tile_store.tile import MapTile
from .semantic import SemanticMap
from .sensor import decode

logger = logging.getLogger(__name__)

# background, divider, crossing, boundary
PALETTE = np.array(
    [
        [24, 24, 28],
        [255, 176, 0],
        [0, 160, 255],
        [235, 45, 70],
    ],
    dtype=np.uint8,
)


def _save(image: Image.Image, path: Union[str, Path], scale: int) -> Path:
    path = Path(path)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        image.save(path, format="PNG")
    except OSError as e:
        raise StoreIOError(f"cannot write {path}: {e}")
    logger.debug(f"rendered {image.width}x{image.height} -> {path}")
    return path


def semantic_image(semantic: SemanticMap) -> Image.Image:
    return Image.fromarray(PALETTE[semantic.labels])


def gate_image(gate: np.ndarray) -> Image.Image:
    gate = np.asarray(gate, dtype=np.float64)
    if gate.ndim != 2:
        raise ShapeError(f"gate map must be 2-D, got {gate.shape}")
    levels = np.round(np.clip(np.nan_to_num(gate), 0.0, 1.0) * 255).astype(np.uint8)
    return Image.fromarray(levels)


def render(target: Union[SemanticMap, np.ndarray], path: Union[str, Path], scale: int = 1) -> Path:
    """A SemanticMap renders with the class palette, a 2-D array as a grayscale gate map."""
    if isinstance(target, SemanticMap):
        return _save(semantic_image(target), path, scale)
    return _save(gate_image(target), path, scale)


def decode_tile(tile: MapTile, embedding: Optional[np.ndarray] = None) -> SemanticMap:
    """Decoded tile in image orientation (north up); unwritten cells are background."""
    features = FeatureMap(tile.features)
    labels = decode(features, embedding).labels
    labels = np.where(tile.written, labels, 0)
    return SemanticMap(labels.T[::-1].copy())
