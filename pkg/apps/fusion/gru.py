from dataclasses import dataclass

import numpy as np

from apps.tensor_core.feature_map import FeatureMap
from apps.tensor_core.kernels import conv2d, elementwise, sigmoid
from .weights import GruWeights


@dataclass
class GruResult:
    """Forward output plus the intermediates gru_backward needs."""

    output: FeatureMap
    z: np.ndarray
    r: np.ndarray
    candidate: np.ndarray
    prior: np.ndarray  # prior with uncovered cells zeroed
    refined: np.ndarray
    coverage: np.ndarray

    @property
    def gate(self) -> np.ndarray:
        """Per-cell update gate, averaged over channels."""
        return self.z.mean(axis=-1)


def gru_update(prior: FeatureMap, refined: FeatureMap, w: GruWeights) -> GruResult:
    """
    z = sigmoid(conv([p, o'], w_z)), r = sigmoid(conv([p, o'], w_r)),
    p~ = tanh(conv([r * p, o'], w_h)), p_t = (1 - z) * p + z * p~.

    Uncovered prior cells enter as 0 with the update gate pinned at 1, so the
    candidate alone fills them; every output cell is covered.
    """
    prior.require_shape(refined, "prior and refined features")
    o = refined.data
    covered = prior.coverage[..., None]
    p = np.where(covered, prior.data, 0).astype(o.dtype)

    stacked = elementwise("concat_channels", p, o)
    z = np.where(covered, sigmoid(conv2d(stacked, w.w_z, w.b_z)), 1.0).astype(o.dtype, copy=False)
    r = sigmoid(conv2d(stacked, w.w_r, w.b_r))
    gated = elementwise("concat_channels", r * p, o)
    candidate = np.tanh(conv2d(gated, w.w_h, w.b_h))
    out = (1 - z) * p + z * candidate

    return GruResult(
        output=FeatureMap(out.astype(o.dtype, copy=False)),
        z=z,
        r=r,
        candidate=candidate,
        prior=p,
        refined=o,
        coverage=prior.coverage.copy(),
    )
