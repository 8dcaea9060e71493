"""
SGD fit of the conv-GRU weights on synthetic traversal pairs.

A pair is two noisy observations of the same crop (prior, current) and the
noiseless encoding as target; a quarter of the pairs carry an empty prior.
Attention weights are not trained.

Background fills most of every crop, so a plain MSE fit learns to shade thin
road elements toward background. The loss weights each cell by the inverse
frequency of its class in the training pool, which keeps the decoded argmax
close to a per-class likelihood decision. Training starts from the blend
weights (an MA(0.5) equivalent) and returns the held-out checkpoint that
decodes best without losing held-out MSE against the start.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

import numpy as np

from apps.common.exceptions import ConfigurationError, StoreIOError, TrainingDiverged
from apps.fusion.gru import gru_update
from apps.fusion.moving_average import ma_update
from apps.fusion.weights import GruWeights
from apps.geometry.grid import GridSpec, local_grid_coords
from apps.simulator.city import CityMap
from apps.simulator.config import RunConfig
from apps.simulator.scenario import build_city
from apps.simulator.semantic import CLASSES, IoUAccumulator, SemanticMap
from apps.simulator.sensor import decode, embedding_matrix, encode, observe
from apps.simulator.trips import plan_trips
from apps.tensor_core.feature_map import FeatureMap
from .backward import LossReport, gru_backward, mse_loss

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 200
DEFAULT_LEARNING_RATE = 1.0
DEFAULT_SEED = 7
BASELINE_ALPHA = 0.5


@dataclass(frozen=True)
class TrainingSetup:
    crop_cells: int = 20
    train_pairs: int = 24
    held_out_pairs: int = 12
    batch_size: int = 4
    empty_prior_fraction: float = 0.25
    checkpoint_every: int = 10


@dataclass
class TraversalPair:
    prior: FeatureMap
    current: FeatureMap
    target: np.ndarray
    labels: np.ndarray
    cell_weights: Optional[np.ndarray] = None


class TrainingResult(NamedTuple):
    weights: GruWeights
    history: List[LossReport]
    initial_held_out_mse: float
    held_out_mse: float
    baseline_mse: float


def _crop_spec(config: RunConfig, setup: TrainingSetup) -> GridSpec:
    n = setup.crop_cells
    return GridSpec(
        resolution=config["grid.resolution_m"],
        bev_rows=n,
        bev_cols=n,
        channels=config["grid.channels"],
        tile_edge=config["grid.tile_edge"],
        patch_size=n,
    )


def sample_pairs(city: CityMap, spec: GridSpec, config: RunConfig, count: int, rng: np.random.Generator,
                 empty_prior_fraction: float) -> List[TraversalPair]:
    """Crops along randomly chosen roads, observed twice under the configured condition."""
    condition = config.condition()
    E = embedding_matrix(spec.channels)
    pairs = []
    for _ in range(count):
        trip = plan_trips(city, spec, 1, condition, int(rng.integers(2**31 - 1)), spacing_m=spec.resolution * 5)[0]
        pose = trip.poses[int(rng.integers(len(trip.poses)))]
        seed_a, seed_b = (int(s) for s in rng.integers(2**31 - 1, size=2))
        prior = observe(city, pose, condition, seed_a, spec, E)
        current = observe(city, pose, condition, seed_b, spec, E)
        covered = np.full(prior.data.shape[:2], rng.random() >= empty_prior_fraction)
        labels = city.labels_at(local_grid_coords(spec, pose))
        target = encode(labels, E).astype(np.float64)
        pairs.append(TraversalPair(
            FeatureMap(prior.data.astype(np.float64), covered),
            FeatureMap(current.data.astype(np.float64)),
            target,
            labels,
        ))
    return pairs


def class_balance(pairs: List[TraversalPair]) -> np.ndarray:
    """Per-class cell weight, inverse to frequency, with mean 1 over the pool's cells."""
    counts = np.bincount(np.concatenate([p.labels.ravel() for p in pairs]), minlength=len(CLASSES))
    present = counts > 0
    table = np.ones(len(CLASSES))
    table[present] = counts.sum() / (present.sum() * counts[present])
    return table


def apply_balance(pairs: List[TraversalPair], table: np.ndarray) -> None:
    for pair in pairs:
        pair.cell_weights = table[pair.labels]


def pool_mse(pairs: List[TraversalPair], w: GruWeights) -> float:
    return float(np.mean([
        mse_loss(gru_update(p.prior, p.current, w).output.data, p.target, p.cell_weights)[0] for p in pairs
    ]))


def ma_baseline_mse(pairs: List[TraversalPair], alpha: float = BASELINE_ALPHA) -> float:
    return float(np.mean([
        mse_loss(ma_update(p.current, p.prior, alpha).data, p.target, p.cell_weights)[0] for p in pairs
    ]))


def pool_miou(pairs: List[TraversalPair], w: GruWeights) -> float:
    """Road-element mIoU of the decoded GRU output over the whole pool."""
    E = embedding_matrix(w.channels)
    acc = IoUAccumulator()
    for p in pairs:
        fused = gru_update(p.prior, p.current, w).output
        acc.add(decode(fused, E), SemanticMap(p.labels))
    mean = acc.result().mean
    return 0.0 if mean is None else mean


def write_loss_csv(history: List[LossReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "mse"])
            for report in history:
                writer.writerow([report.step, repr(report.mse)])
    except OSError as e:
        raise StoreIOError(f"cannot write loss history {path}: {e}")
    return path


def train_gru(sim_config: RunConfig, epochs: int = DEFAULT_STEPS, learning_rate: float = DEFAULT_LEARNING_RATE,
              seed: int = DEFAULT_SEED, setup: Optional[TrainingSetup] = None) -> TrainingResult:
    """
    `epochs` counts SGD steps. history[i].mse is the class-balanced
    training-pool MSE before step i. Every `checkpoint_every` steps the
    weights are scored on the held-out pool; the returned (float32) weights
    are the checkpoint with the best held-out mIoU among those whose
    held-out MSE has not risen above the start.
    """
    setup = setup or TrainingSetup()
    if epochs < 0:
        raise ConfigurationError(f"step count must be >= 0, got {epochs}")
    if learning_rate < 0:
        raise ConfigurationError(f"learning rate must be >= 0, got {learning_rate}")

    spec = _crop_spec(sim_config, setup)
    city = build_city(sim_config, spec)
    rng = np.random.default_rng(seed)
    train = sample_pairs(city, spec, sim_config, setup.train_pairs, rng, setup.empty_prior_fraction)
    held_out = sample_pairs(city, spec, sim_config, setup.held_out_pairs, rng, setup.empty_prior_fraction)
    table = class_balance(train)
    apply_balance(train, table)
    apply_balance(held_out, table)
    batch = min(setup.batch_size, len(train))
    every = max(setup.checkpoint_every, 1)

    w = GruWeights.blend(spec.channels, dtype=np.float64)
    initial = pool_mse(held_out, w)
    best, best_mse, best_miou = w.copy(), initial, pool_miou(held_out, w)
    history: List[LossReport] = []
    for step in range(epochs):
        loss = pool_mse(train, w)
        grads = {name: np.zeros_like(block) for name, block in w.blocks().items()}
        for index in rng.choice(len(train), size=batch, replace=False):
            pair = train[int(index)]
            result = gru_update(pair.prior, pair.current, w)
            _, upstream = mse_loss(result.output.data, pair.target, pair.cell_weights)
            for name, g in gru_backward(result, w, upstream).weights.items():
                grads[name] += g / batch

        report = LossReport(step, loss, {k: float(np.linalg.norm(g)) for k, g in grads.items()})
        history.append(report)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingDiverged(f"loss became non-finite at step {step}", history)
        for name, block in w.blocks().items():
            block -= learning_rate * grads[name]
        if not w.is_finite():
            raise TrainingDiverged(f"weights became non-finite at step {step}", history)
        if step % 50 == 0:
            logger.info(f"step {step}: mse {loss:.6f}")
        if (step + 1) % every == 0 or step + 1 == epochs:
            held_mse = pool_mse(held_out, w)
            if held_mse <= initial:
                held_miou = pool_miou(held_out, w)
                if held_miou > best_miou:
                    best, best_mse, best_miou = w.copy(), held_mse, held_miou

    baseline = ma_baseline_mse(held_out)
    logger.info(
        f"held-out mse {initial:.6f} -> {best_mse:.6f} (miou {best_miou:.3f}), "
        f"MA({BASELINE_ALPHA}) baseline {baseline:.6f}"
    )
    return TrainingResult(best.astype(np.float32), history, initial, best_mse, baseline)
