"""
Bilinear resampling between the BEV frame and the global map grid.

Sample coordinates are continuous cell indices u = x / r - 0.5, so cell
centers land on integers. Fractions within SNAP_TOL of a lattice point are
snapped onto it; rotated lattice poses otherwise leak ~1e-15 weight into
neighbors.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from apps.common.exceptions import ShapeError
from apps.tensor_core.feature_map import FeatureMap
from .grid import GridCoords

SNAP_TOL = 1e-6


def continuous_index(coords: GridCoords, resolution: float) -> Tuple[np.ndarray, np.ndarray]:
    u = coords.x / resolution - 0.5
    v = coords.y / resolution - 0.5
    return _snap(u), _snap(v)


def _snap(u: np.ndarray) -> np.ndarray:
    nearest = np.round(u)
    return np.where(np.abs(u - nearest) < SNAP_TOL, nearest, u)


def _corners(u: np.ndarray, v: np.ndarray):
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    return (
        (i0, j0, (1.0 - fu) * (1.0 - fv)),
        (i0 + 1, j0, fu * (1.0 - fv)),
        (i0, j0 + 1, (1.0 - fu) * fv),
        (i0 + 1, j0 + 1, fu * fv),
    )


def bilinear_sample(source: FeatureMap, origin: Tuple[int, int], resolution: float,
                    coords: GridCoords) -> FeatureMap:
    """
    Sample `source` (whose cell [0, 0] is global cell `origin`) at each coordinate.

    A sample is covered only when every neighbor with nonzero weight is in
    bounds and covered; otherwise its value is 0 and its mask is false.
    """
    if resolution <= 0:
        raise ShapeError(f"resolution must be > 0, got {resolution}")
    rows, cols = coords.shape
    src = source.data
    src_rows, src_cols, channels = src.shape
    if src_rows == 0 or src_cols == 0:
        return FeatureMap(np.zeros((rows, cols, channels), dtype=src.dtype), np.zeros((rows, cols), dtype=bool))
    u, v = continuous_index(coords, resolution)
    u = u.ravel() - origin[0]
    v = v.ravel() - origin[1]

    out = np.zeros((u.size, channels), dtype=np.float64)
    covered = np.ones(u.size, dtype=bool)
    for i, j, w in _corners(u, v):
        used = w > 0
        inside = (i >= 0) & (i < src_rows) & (j >= 0) & (j < src_cols)
        ic = np.clip(i, 0, src_rows - 1)
        jc = np.clip(j, 0, src_cols - 1)
        ok = inside & source.coverage[ic, jc]
        covered &= ~used | ok
        out += np.where((used & ok)[:, None], w[:, None] * src[ic, jc], 0.0)

    out[~covered] = 0.0
    return FeatureMap(
        out.reshape(rows, cols, channels).astype(src.dtype),
        covered.reshape(rows, cols),
    )


@dataclass
class SplatResult:
    """Global cells touched by a forward splat, with normalized values and total weight."""

    gx: np.ndarray
    gy: np.ndarray
    features: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return int(self.gx.size)


def bilinear_splat(values: FeatureMap, coords: GridCoords, resolution: float,
                   min_weight: float = 0.05) -> SplatResult:
    """
    Distribute each covered BEV cell onto its four map neighbors with bilinear weights.

    Cells whose accumulated weight stays below `min_weight` are dropped.
    """
    if values.shape[:2] != coords.shape:
        raise ShapeError(f"values {values.shape[:2]} do not match coords {coords.shape}")
    channels = values.channels
    mask = values.coverage.ravel()
    data = values.data.reshape(-1, channels)[mask].astype(np.float64)
    u, v = continuous_index(coords, resolution)
    u, v = u.ravel()[mask], v.ravel()[mask]
    if u.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SplatResult(empty, empty, np.zeros((0, channels), dtype=np.float32), np.zeros(0))

    corners = _corners(u, v)
    gi = np.concatenate([c[0] for c in corners])
    gj = np.concatenate([c[1] for c in corners])
    w = np.concatenate([c[2] for c in corners])
    vals = np.concatenate([data] * 4)

    gi0, gj0 = gi.min(), gj.min()
    height = int(gj.max() - gj0 + 1)
    lin = (gi - gi0) * height + (gj - gj0)
    size = int(lin.max() + 1)
    w_sum = np.bincount(lin, weights=w, minlength=size)
    wv_sum = np.stack(
        [np.bincount(lin, weights=w * vals[:, c], minlength=size) for c in range(channels)],
        axis=1,
    )

    keep = np.flatnonzero((w_sum >= min_weight) & (w_sum > 0))
    return SplatResult(
        gx=keep // height + gi0,
        gy=keep % height + gj0,
        features=(wv_sum[keep] / w_sum[keep, None]).astype(np.float32),
        weight=w_sum[keep],
    )
