"""
Reverse-mode gradients of the GRU and moving-average updates.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from apps.common.exceptions import ShapeError
from apps.fusion.gru import GruResult
from apps.fusion.weights import GruWeights
from apps.tensor_core.kernels import conv2d_backward, elementwise


@dataclass
class GruGradients:
    weights: Dict[str, np.ndarray]
    prior: np.ndarray
    refined: np.ndarray

    def norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(g)) for name, g in self.weights.items()}


@dataclass
class LossReport:
    step: int
    mse: float
    grad_norms: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"step": self.step, "mse": self.mse, "grad_norms": dict(sorted(self.grad_norms.items()))}


def gru_backward(result: GruResult, w: GruWeights, upstream: np.ndarray) -> GruGradients:
    """Gradients of sum(upstream * p_t) through one gru_update forward pass."""
    if result is None or result.z is None or result.candidate is None:
        raise ShapeError("gru_backward needs the intermediates of a forward pass")
    p, o, z, r, h = result.prior, result.refined, result.z, result.r, result.candidate
    g = np.asarray(upstream, dtype=p.dtype)
    if g.shape != p.shape:
        raise ShapeError(f"upstream gradient {g.shape} != output {p.shape}")
    channels = p.shape[-1]

    d_z = g * (h - p)
    d_h = g * z
    d_p = g * (1 - z)

    d_ah = d_h * (1 - h * h)
    x2 = elementwise("concat_channels", r * p, o)
    d_x2, d_wh, d_bh = conv2d_backward(x2, w.w_h, d_ah)
    d_rp, d_o = d_x2[..., :channels], d_x2[..., channels:].copy()
    d_r = d_rp * p
    d_p = d_p + d_rp * r

    d_az = d_z * z * (1 - z)
    d_ar = d_r * r * (1 - r)
    x1 = elementwise("concat_channels", p, o)
    d_x1z, d_wz, d_bz = conv2d_backward(x1, w.w_z, d_az)
    d_x1r, d_wr, d_br = conv2d_backward(x1, w.w_r, d_ar)
    d_x1 = d_x1z + d_x1r
    d_p = d_p + d_x1[..., :channels]
    d_o = d_o + d_x1[..., channels:]

    # uncovered prior cells entered as the constant 0
    d_p = np.where(result.coverage[..., None], d_p, 0)

    return GruGradients(
        weights={"w_z": d_wz, "w_r": d_wr, "w_h": d_wh, "b_z": d_bz, "b_r": d_br, "b_h": d_bh},
        prior=d_p,
        refined=d_o,
    )


def ma_backward(current: np.ndarray, prior: np.ndarray, coverage: np.ndarray, alpha: float,
                upstream: np.ndarray):
    """(d_current, d_prior, d_alpha) of sum(upstream * ma_update(...))."""
    covered = coverage[..., None]
    a = np.where(covered, alpha, 1.0)
    d_current = upstream * a
    d_prior = np.where(covered, upstream * (1 - alpha), 0)
    d_alpha = float(np.sum(np.where(covered, upstream * (current - prior), 0)))
    return d_current, d_prior, d_alpha


def mse_loss(prediction: np.ndarray, target: np.ndarray, cell_weights: Optional[np.ndarray] = None):
    """
    Mean over all elements; returns (loss, d loss / d prediction).

    `cell_weights` [rows, cols] scales every channel of a cell.
    """
    diff = prediction - target
    if cell_weights is not None:
        scaled = diff * cell_weights[..., None]
        return float(np.mean(scaled * diff)), 2.0 * scaled / diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
