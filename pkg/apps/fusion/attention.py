"""
Current-to-prior cross-attention over non-overlapping patch tokens.

Queries come from current features, keys and values from prior features.
Prior patches with no covered cell are dropped from the key/value set; when
none remain the current features pass through unchanged.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from apps.common.exceptions import ConfigurationError, ShapeError
from apps.tensor_core.feature_map import FeatureMap
from apps.tensor_core.kernels import matmul, softmax_rows
from .weights import AttentionWeights, PositionalEmbeddings


@dataclass
class AttentionResult:
    output: FeatureMap
    # [heads, query tokens, covered prior tokens]; None when the prior was empty
    weights: Optional[np.ndarray]
    covered_tokens: np.ndarray


def to_patches(data: np.ndarray, patch: int) -> np.ndarray:
    rows, cols, channels = data.shape
    nr, nc = rows // patch, cols // patch
    blocks = data.reshape(nr, patch, nc, patch, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(nr * nc, patch * patch * channels)


def from_patches(tokens: np.ndarray, rows: int, cols: int, channels: int, patch: int) -> np.ndarray:
    nr, nc = rows // patch, cols // patch
    blocks = tokens.reshape(nr, nc, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(rows, cols, channels)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    tokens, dim = x.shape
    return x.reshape(tokens, heads, dim // heads).transpose(1, 0, 2)


def cross_attend(current: FeatureMap, prior: FeatureMap, pe: Optional[PositionalEmbeddings],
                 w: AttentionWeights, use_pe: bool = True) -> AttentionResult:
    current.require_shape(prior, "current and prior features")
    rows, cols, channels = current.shape
    patch = w.patch_size
    if rows % patch or cols % patch:
        raise ConfigurationError(f"BEV {rows}x{cols} is not divisible into {patch}x{patch} patches")
    if channels != w.channels:
        raise ShapeError(f"attention weights expect {w.channels} channels, got {channels}")
    if use_pe and (pe is None or pe.shape != current.shape):
        raise ShapeError(f"positional embeddings {None if pe is None else pe.shape} != {current.shape}")

    covered = prior.coverage.reshape(rows // patch, patch, cols // patch, patch).any(axis=(1, 3)).ravel()
    if not covered.any():
        return AttentionResult(current.copy(), None, covered)

    dtype = current.data.dtype
    q_in = current.data
    kv_in = np.where(prior.coverage[..., None], prior.data, 0).astype(dtype)
    if use_pe:
        q_in = q_in + pe.pe_current.astype(dtype)
        kv_in = kv_in + pe.pe_prior.astype(dtype)

    q_tokens = matmul(to_patches(q_in, patch), w.w_embed_q.astype(dtype))
    kv_tokens = matmul(to_patches(kv_in, patch)[covered], w.w_embed_kv.astype(dtype))

    q = _split_heads(matmul(q_tokens, w.w_q.astype(dtype)), w.heads)
    k = _split_heads(matmul(kv_tokens, w.w_k.astype(dtype)), w.heads)
    v = _split_heads(matmul(kv_tokens, w.w_v.astype(dtype)), w.heads)

    scale = 1.0 / math.sqrt(w.dim // w.heads)
    attn = softmax_rows(np.einsum("hqd,hkd->hqk", q, k), scale=scale)
    attended = np.einsum("hqk,hkd->hqd", attn, v).transpose(1, 0, 2).reshape(q_tokens.shape)

    hidden = matmul(attended, w.w_fc.astype(dtype)) + w.b_fc.astype(dtype)
    delta = from_patches(matmul(hidden, w.w_out.astype(dtype)), rows, cols, channels, patch)
    out = FeatureMap((current.data + delta).astype(dtype, copy=False), current.coverage.copy())
    return AttentionResult(out, attn, covered)


def c2p_attention(current: FeatureMap, prior: FeatureMap, pe: Optional[PositionalEmbeddings],
                  w: AttentionWeights, use_pe: bool = True) -> FeatureMap:
    return cross_attend(current, prior, pe, w, use_pe).output
