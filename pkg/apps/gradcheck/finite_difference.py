"""
Central-difference gradient oracle (float64).
"""
import logging
from typing import Callable, Dict

import numpy as np

from apps.fusion.gru import gru_update
from apps.fusion.weights import GruWeights
from apps.tensor_core.feature_map import FeatureMap
from .backward import gru_backward

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-3


def finite_difference(f: Callable[[np.ndarray], float], params: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Perturbs `params` in place one coordinate at a time and restores it."""
    x = params
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        f_plus = f(x)
        flat[i] = original - eps
        f_minus = f(x)
        flat[i] = original
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gru_gradients(seed: int, shape=(6, 6, 4), eps: float = DEFAULT_EPS,
                        prior_coverage: float = 1.0) -> Dict[str, float]:
    """
    Relative error per parameter block (plus prior and refined inputs) of
    gru_backward against central differences of L = sum(u * p_t).
    """
    rows, cols, channels = shape
    rng = np.random.default_rng(seed)
    w = GruWeights.initialize(channels, seed, dtype=np.float64)
    for name in ("b_z", "b_r", "b_h"):
        getattr(w, name)[:] = rng.normal(scale=0.5, size=channels)
    prior = rng.normal(size=shape)
    refined = rng.normal(size=shape)
    coverage = rng.random((rows, cols)) < prior_coverage
    upstream = rng.normal(size=shape)

    def loss() -> float:
        out = gru_update(FeatureMap(prior, coverage), FeatureMap(refined), w).output.data
        return float(np.sum(upstream * out))

    result = gru_update(FeatureMap(prior, coverage), FeatureMap(refined), w)
    grads = gru_backward(result, w, upstream)

    errors = {}
    for name, block in w.blocks().items():
        numeric = finite_difference(lambda _: loss(), block, eps)
        errors[name] = relative_error(grads.weights[name], numeric)
    errors["prior"] = relative_error(grads.prior, finite_difference(lambda _: loss(), prior, eps))
    errors["refined"] = relative_error(grads.refined, finite_difference(lambda _: loss(), refined, eps))
    logger.debug(f"gradcheck seed={seed} errors={errors}")
    return errors
