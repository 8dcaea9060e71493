import numpy as np

from apps.common.exceptions import ConfigurationError
from apps.tensor_core.feature_map import FeatureMap


def ma_update(current: FeatureMap, prior: FeatureMap, alpha: float) -> FeatureMap:
    """alpha * current + (1 - alpha) * prior; alpha is 1 wherever the prior is uncovered."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
    current.require_shape(prior, "current and prior features")
    a = np.where(prior.coverage, alpha, 1.0)[..., None].astype(current.data.dtype)
    p = np.where(prior.coverage[..., None], prior.data, 0).astype(current.data.dtype)
    return FeatureMap(a * current.data + (1 - a) * p, current.coverage.copy())
