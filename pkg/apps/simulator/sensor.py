"""
Synthetic stand-in for the BEV encoder and the map decoder.

observe() embeds the ground-truth crop with a fixed [4, C] matrix E whose
rows are orthonormal, then adds range-dependent Gaussian noise and zeroes
an angular occlusion sector. decode() projects with pinv(E) and takes the
argmax; a small background bias sends all-zero features to background.
"""
import functools
import logging
from typing import Optional

import numpy as np
from django.conf import settings

from apps.common.exceptions import ConfigurationError, ShapeError
from apps.geometry.grid import GridSpec, ego_cell_centers, local_grid_coords
from apps.geometry.pose import EgoPose
from apps.tensor_core.feature_map import FeatureMap
from .city import CityMap
from .conditions import Condition
from .semantic import BACKGROUND, CLASSES, SemanticMap

logger = logging.getLogger(__name__)

BACKGROUND_BIAS = 1e-6


@functools.lru_cache(maxsize=16)
def _embedding(channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(channels, len(CLASSES))))
    return q.T.astype(np.float32)


def embedding_matrix(channels: int, seed: Optional[int] = None) -> np.ndarray:
    """[4, C] matrix with orthonormal rows; identical for every caller with the same seed."""
    if channels < len(CLASSES):
        raise ConfigurationError(f"the decoder needs at least {len(CLASSES)} channels, got {channels}")
    seed = settings.NMP_EMBED_SEED if seed is None else seed
    return _embedding(channels, seed).copy()


def min_class_distance(embedding: np.ndarray) -> float:
    rows = embedding.astype(np.float64)
    diffs = rows[:, None, :] - rows[None, :, :]
    dist = np.linalg.norm(diffs, axis=-1)
    return float(dist[~np.eye(len(rows), dtype=bool)].min())


def encode(labels: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """Noiseless features E[label] per cell."""
    return embedding[labels]


def _occlusion_mask(spec: GridSpec, rate: float, rng: np.random.Generator) -> np.ndarray:
    """One sector around a random bearing holding round(rate * cells) cells."""
    centers = ego_cell_centers(spec)
    bearing = np.arctan2(centers[..., 1], centers[..., 0]).ravel()
    heading = rng.uniform(-np.pi, np.pi)
    offset = np.abs(np.angle(np.exp(1j * (bearing - heading))))
    n = int(round(rate * bearing.size))
    mask = np.zeros(bearing.size, dtype=bool)
    if n:
        mask[np.argsort(offset, kind="stable")[:n]] = True
    return mask.reshape(spec.bev_rows, spec.bev_cols)


def noise_scale(spec: GridSpec, condition: Condition) -> np.ndarray:
    """Per-cell noise deviation sigma * (1 + range_decay * distance)."""
    distance = np.linalg.norm(ego_cell_centers(spec), axis=-1)
    return condition.noise_sigma * (1.0 + condition.range_decay * distance)


def observe(city: CityMap, pose: EgoPose, condition: Condition, seed: int, spec: GridSpec,
            embedding: Optional[np.ndarray] = None) -> FeatureMap:
    """Noisy BEV features at `pose`; deterministic given `seed`."""
    E = embedding_matrix(spec.channels) if embedding is None else embedding
    if E.shape != (len(CLASSES), spec.channels):
        raise ShapeError(f"embedding {E.shape} does not match {spec.channels} channels")
    labels = city.labels_at(local_grid_coords(spec, pose))
    features = encode(labels, E).astype(np.float32)

    rng = np.random.default_rng(seed)
    if condition.noise_sigma > 0:
        scale = noise_scale(spec, condition)[..., None]
        features += (rng.normal(size=features.shape) * scale).astype(np.float32)
    if condition.occlusion_rate > 0:
        features[_occlusion_mask(spec, condition.occlusion_rate, rng)] = 0.0
    return FeatureMap(features)


def decode(features: FeatureMap, embedding: Optional[np.ndarray] = None) -> SemanticMap:
    E = embedding_matrix(features.channels) if embedding is None else embedding
    if E.shape[1] != features.channels:
        raise ShapeError(f"decoder expects {E.shape[1]} channels, got {features.channels}")
    readout = np.linalg.pinv(E.astype(np.float64))
    scores = features.data.astype(np.float64) @ readout
    scores[..., BACKGROUND] += BACKGROUND_BIAS
    return SemanticMap(np.argmax(scores, axis=-1), scores)
