"""
Fusion entry point used by the fleet loop and the trainer.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from django.conf import settings

from apps.common.exceptions import ConfigurationError, ShapeError
from apps.tensor_core.feature_map import FeatureMap
from .attention import c2p_attention
from .gru import gru_update
from .moving_average import ma_update
from .weights import FusionWeights, PositionalEmbeddings

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "ma", "gru", "gru_pe", "ca", "gru_ca")
ATTENTION_STRATEGIES = ("ca", "gru_ca")


@dataclass
class FusionOutput:
    refined: FeatureMap  # feeds the decoder
    new_prior: FeatureMap  # feeds write-back
    gate: Optional[np.ndarray] = None  # per-cell mean z_t for GRU strategies


def with_positions(prior: FeatureMap, current: FeatureMap, pe: PositionalEmbeddings):
    """Role-specific embeddings added to a prior/current pair; gaps in the prior stay gaps."""
    prior.require_shape(current, "prior and current features")
    if pe.shape != current.shape:
        raise ShapeError(f"positional embeddings {pe.shape} != {current.shape}")
    dtype = current.data.dtype
    return (
        FeatureMap((prior.data + pe.pe_prior).astype(dtype, copy=False), prior.coverage.copy()),
        FeatureMap((current.data + pe.pe_current).astype(dtype, copy=False), current.coverage.copy()),
    )


def fuse(strategy: str, current: FeatureMap, prior: FeatureMap,
         weights: Optional[FusionWeights] = None, alpha: Optional[float] = None,
         use_pe: bool = True) -> FusionOutput:
    """
    ca refines the current features against the prior and writes the refined
    map back unchanged; gru_pe adds the local positional embeddings to both
    GRU inputs. use_pe only switches the embeddings inside the attention.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown fusion strategy '{strategy}', expected one of {STRATEGIES}")

    if strategy == "none":
        return FusionOutput(current, current)

    if strategy == "ma":
        alpha = settings.NMP_DEFAULT_ALPHA if alpha is None else alpha
        blended = ma_update(current, prior, alpha)
        return FusionOutput(blended, blended)

    if weights is None:
        raise ConfigurationError(f"strategy '{strategy}' needs fusion weights")

    refined = current
    if strategy in ATTENTION_STRATEGIES:
        if weights.attention is None:
            raise ConfigurationError(f"strategy '{strategy}' needs attention weights")
        refined = c2p_attention(current, prior, weights.pe, weights.attention, use_pe=use_pe)
        if strategy == "ca":
            return FusionOutput(refined, refined)
    elif strategy == "gru_pe":
        if weights.pe is None:
            raise ConfigurationError("strategy 'gru_pe' needs positional embeddings")
        prior, refined = with_positions(prior, refined, weights.pe)

    result = gru_update(prior, refined, weights.gru)
    return FusionOutput(result.output, result.output, result.gate)
