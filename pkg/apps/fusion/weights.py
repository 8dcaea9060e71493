"""
Parameter blocks of the fusion module.

All blocks are plain numpy arrays so the trainer can update them in place
and the checkpoint writer can walk them by name.
"""
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, Optional

import numpy as np
from django.conf import settings

from apps.common.exceptions import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

GRU_KERNEL = 3
PASSTHROUGH_GATE_BIAS = 20.0
PE_INIT_STD = 0.02


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class GruWeights:
    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    BLOCKS = ("w_z", "w_r", "w_h", "b_z", "b_r", "b_h")

    def __post_init__(self):
        channels = self.b_z.shape[0]
        for name in ("w_z", "w_r", "w_h"):
            kernel = getattr(self, name)
            if kernel.shape != (channels, 2 * channels, GRU_KERNEL, GRU_KERNEL):
                raise ShapeError(f"{name} must be [{channels}, {2 * channels}, 3, 3], got {kernel.shape}")
        for name in ("b_r", "b_h"):
            if getattr(self, name).shape != (channels,):
                raise ShapeError(f"{name} must have {channels} entries")

    @property
    def channels(self) -> int:
        return int(self.b_z.shape[0])

    @classmethod
    def initialize(cls, channels: int, seed: int, dtype=np.float32) -> "GruWeights":
        rng = np.random.default_rng(seed)
        shape = (channels, 2 * channels, GRU_KERNEL, GRU_KERNEL)
        fan_in = 2 * channels * GRU_KERNEL * GRU_KERNEL
        return cls(
            w_z=_uniform(rng, shape, fan_in, dtype),
            w_r=_uniform(rng, shape, fan_in, dtype),
            w_h=_uniform(rng, shape, fan_in, dtype),
            b_z=np.full(channels, -1.0, dtype=dtype),
            b_r=np.zeros(channels, dtype=dtype),
            b_h=np.zeros(channels, dtype=dtype),
        )

    @classmethod
    def passthrough(cls, channels: int, dtype=np.float32) -> "GruWeights":
        """Gate fully open, candidate = tanh(current); the prior is ignored."""
        shape = (channels, 2 * channels, GRU_KERNEL, GRU_KERNEL)
        w_h = np.zeros(shape, dtype=dtype)
        centre = GRU_KERNEL // 2
        for c in range(channels):
            w_h[c, channels + c, centre, centre] = 1.0
        return cls(
            w_z=np.zeros(shape, dtype=dtype),
            w_r=np.zeros(shape, dtype=dtype),
            w_h=w_h,
            b_z=np.full(channels, PASSTHROUGH_GATE_BIAS, dtype=dtype),
            b_r=np.zeros(channels, dtype=dtype),
            b_h=np.zeros(channels, dtype=dtype),
        )

    @classmethod
    def blend(cls, channels: int, dtype=np.float32) -> "GruWeights":
        """Gate half open, candidate = tanh(current): MA(0.5) with a squashed current."""
        weights = cls.passthrough(channels, dtype)
        weights.b_z[:] = 0.0
        return weights

    def blocks(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.BLOCKS}

    def copy(self) -> "GruWeights":
        return GruWeights(**{k: v.copy() for k, v in self.blocks().items()})

    def astype(self, dtype) -> "GruWeights":
        return GruWeights(**{k: v.astype(dtype) for k, v in self.blocks().items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks().values())


@dataclass
class AttentionWeights:
    patch_size: int
    heads: int
    w_embed_q: np.ndarray  # [P*P*C, d]
    w_embed_kv: np.ndarray  # [P*P*C, d]
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_fc: np.ndarray
    b_fc: np.ndarray
    w_out: np.ndarray  # [d, P*P*C]

    BLOCKS = ("w_embed_q", "w_embed_kv", "w_q", "w_k", "w_v", "w_fc", "b_fc", "w_out")

    def __post_init__(self):
        d = self.dim
        if self.heads <= 0 or d % self.heads:
            raise ConfigurationError(f"attention dim {d} is not divisible by {self.heads} heads")
        token = self.w_embed_q.shape[0]
        if self.w_embed_kv.shape != (token, d) or self.w_out.shape != (d, token):
            raise ShapeError("attention embed/out projections disagree on token size")
        for name in ("w_q", "w_k", "w_v", "w_fc"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be [{d}, {d}]")
        if self.b_fc.shape != (d,):
            raise ShapeError(f"b_fc must have {d} entries")

    @property
    def dim(self) -> int:
        return int(self.w_embed_q.shape[1])

    @property
    def channels(self) -> int:
        return int(self.w_embed_q.shape[0] // (self.patch_size * self.patch_size))

    @classmethod
    def initialize(cls, channels: int, seed: int, patch_size: Optional[int] = None,
                   dim: Optional[int] = None, heads: Optional[int] = None) -> "AttentionWeights":
        patch_size = patch_size or settings.NMP_PATCH_SIZE
        dim = dim or settings.NMP_ATTENTION_DIM
        heads = heads or settings.NMP_ATTENTION_HEADS
        token = patch_size * patch_size * channels
        rng = np.random.default_rng(seed)
        return cls(
            patch_size=patch_size,
            heads=heads,
            w_embed_q=_uniform(rng, (token, dim), token),
            w_embed_kv=_uniform(rng, (token, dim), token),
            w_q=_uniform(rng, (dim, dim), dim),
            w_k=_uniform(rng, (dim, dim), dim),
            w_v=_uniform(rng, (dim, dim), dim),
            w_fc=_uniform(rng, (dim, dim), dim),
            b_fc=np.zeros(dim, dtype=np.float32),
            w_out=_uniform(rng, (dim, token), dim),
        )

    def zero_value_path(self) -> "AttentionWeights":
        """Same weights with W_out = 0, so attention reduces to its residual."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["w_out"] = np.zeros_like(self.w_out)
        return AttentionWeights(**values)

    def blocks(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.BLOCKS}


@dataclass
class PositionalEmbeddings:
    pe_prior: np.ndarray
    pe_current: np.ndarray

    def __post_init__(self):
        if self.pe_prior.shape != self.pe_current.shape or self.pe_prior.ndim != 3:
            raise ShapeError(f"positional embeddings disagree: {self.pe_prior.shape} vs {self.pe_current.shape}")

    @property
    def shape(self):
        return self.pe_prior.shape

    @classmethod
    def initialize(cls, rows: int, cols: int, channels: int, seed: int) -> "PositionalEmbeddings":
        rng = np.random.default_rng(seed)
        shape = (rows, cols, channels)
        return cls(
            pe_prior=rng.normal(0.0, PE_INIT_STD, size=shape).astype(np.float32),
            pe_current=rng.normal(0.0, PE_INIT_STD, size=shape).astype(np.float32),
        )

    @classmethod
    def zeros(cls, rows: int, cols: int, channels: int) -> "PositionalEmbeddings":
        return cls(np.zeros((rows, cols, channels), np.float32), np.zeros((rows, cols, channels), np.float32))

    def swapped(self) -> "PositionalEmbeddings":
        return PositionalEmbeddings(self.pe_current, self.pe_prior)


@dataclass
class FusionWeights:
    gru: GruWeights
    attention: Optional[AttentionWeights] = None
    pe: Optional[PositionalEmbeddings] = None
    embedding: Optional[np.ndarray] = field(default=None)  # decoder geometry, [4, C]

    @classmethod
    def initialize(cls, spec, seed: Optional[int] = None, with_attention: bool = True,
                   attention_dim: Optional[int] = None, heads: Optional[int] = None) -> "FusionWeights":
        """Seeded weights for a GridSpec; each block draws from its own derived seed."""
        seed = settings.NMP_WEIGHT_SEED if seed is None else seed
        gru = GruWeights.initialize(spec.channels, seed)
        attention = pe = None
        if with_attention:
            attention = AttentionWeights.initialize(
                spec.channels, seed + 1, spec.patch_size, attention_dim, heads
            )
            pe = PositionalEmbeddings.initialize(spec.bev_rows, spec.bev_cols, spec.channels, seed + 2)
        logger.debug(f"initialized fusion weights seed={seed} channels={spec.channels}")
        return cls(gru=gru, attention=attention, pe=pe)

    @classmethod
    def signal_preserving(cls, spec, seed: Optional[int] = None) -> "FusionWeights":
        """Passthrough GRU, zero value path and zero embeddings; used for noiseless fixed-point runs."""
        base = cls.initialize(spec, seed)
        return cls(
            gru=GruWeights.passthrough(spec.channels),
            attention=base.attention.zero_value_path(),
            pe=PositionalEmbeddings.zeros(spec.bev_rows, spec.bev_cols, spec.channels),
        )
