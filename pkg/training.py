"""
Mini-batch SGD with classic momentum, polynomial learning-rate decay and
ignore-aware cross-entropy, for both the classifier and the detailer.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

import evaluation
from checkpoint import save_checkpoint
from errors import ArgumentError, ConfigError, DataError, ShapeError, TrainingError
from mini_psp import MiniPSP, NetworkConfig
from synth_data import ChannelStats, SampleTriplet, augment, channel_stats
from tensor_core import ConvGrads, Tensor4, softmax_ce_ignore

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("iter", "lr", "loss", "val_miou")


class ModelKind(str, Enum):
    CLASSIFIER = "classifier"
    DETAILER = "detailer"


@dataclass
class TrainConfig:
    """
    Optimisation recipe. Defaults follow the reference recipe (lr 0.01,
    poly power 0.9, momentum 0.99, batch 8) with a desk-scale budget.
    """

    base_lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.99
    batch_size: int = 8
    total_iters: int = 2000
    crop: int = 48
    seed: int = 0
    eval_every: int = 200
    grad_clip: float | None = 5.0
    log_every: int = 50

    def __post_init__(self):
        # base_lr == 0 is accepted as a frozen dry run
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be > 0, got {self.poly_power}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ConfigError("batch_size and total_iters must be >= 1")
        if self.crop < 1:
            raise ConfigError(f"crop must be >= 1, got {self.crop}")
        if self.eval_every < 0 or self.log_every < 1:
            raise ConfigError("eval_every must be >= 0 and log_every >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0 or None, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        return cls(**values)


@dataclass(eq=False)
class TrainState:
    network: MiniPSP
    momentum: dict[str, ConvGrads]
    rng: np.random.Generator
    iteration: int = 0

    @classmethod
    def fresh(cls, network: MiniPSP, seed: int) -> TrainState:
        buffers = {
            path: ConvGrads(np.zeros_like(p.weights.values), np.zeros_like(p.bias))
            for path, p in network.named_parameters()
        }
        return cls(network, buffers, np.random.default_rng(seed))


def poly_lr(t: int, cfg: TrainConfig) -> float:
    """
    base_lr * (1 - t / total_iters) ** poly_power.

    Raises:
        - ArgumentError: t outside [0, total_iters]
    """
    if not 0 <= t <= cfg.total_iters:
        raise ArgumentError(f"iteration {t} outside [0, {cfg.total_iters}]")
    return cfg.base_lr * (1.0 - t / cfg.total_iters) ** cfg.poly_power


def sgd_step(state: TrainState, grads: dict[str, ConvGrads], lr: float, momentum: float) -> TrainState:
    """
    Classic heavy-ball update, in place: buf <- momentum * buf + grad; param <- param - lr * buf.

    Raises:
        - ShapeError: a gradient is missing or shaped unlike its parameter
        - TrainingError: a gradient is non-finite, naming the parameter path
    """
    for path, params in state.network.named_parameters():
        if path not in grads:
            raise ShapeError(f"no gradient for parameter {path}")
        g = grads[path]
        if g.weights.shape != params.weights.dims or g.bias.shape != params.bias.shape:
            raise ShapeError(f"gradient shapes {g.weights.shape}/{g.bias.shape} do not match parameter {path}")
        if not (np.isfinite(g.weights).all() and np.isfinite(g.bias).all()):
            raise TrainingError(f"non-finite gradient for parameter {path} at iteration {state.iteration}")

    for path, params in state.network.named_parameters():
        buf, g = state.momentum[path], grads[path]
        buf.weights *= momentum
        buf.weights += g.weights
        buf.bias *= momentum
        buf.bias += g.bias
        params.weights.values -= lr * buf.weights
        params.bias -= lr * buf.bias
    state.iteration += 1
    return state


def clip_gradients(grads: dict[str, ConvGrads], max_norm: float) -> tuple[dict[str, ConvGrads], float]:
    """ Rescale all gradients together so their global L2 norm is at most max_norm. """
    squares = [float(np.sum(np.square(g.weights, dtype=np.float64)) + np.sum(np.square(g.bias, dtype=np.float64)))
               for g in grads.values()]
    norm = float(np.sqrt(sum(squares)))
    if not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {path: ConvGrads(g.weights * scale, g.bias * scale) for path, g in grads.items()}, norm


@dataclass(eq=False)
class Batch:
    images: Tensor4
    targets: np.ndarray
    coarse: np.ndarray | None = None


def make_batch(triplets: list[SampleTriplet], indices, seeds, crop: int, norm: ChannelStats | None,
               with_coarse: bool) -> Batch:
    """ Augment triplets[indices] with one seed each and stack them. """
    samples = [augment(triplets[int(i)], crop, int(s), norm) for i, s in zip(indices, seeds)]
    images = Tensor4(np.stack([s.image for s in samples]).astype(np.float32))
    targets = np.stack([s.fine.labels for s in samples])
    coarse = np.stack([s.coarse.labels for s in samples]) if with_coarse else None
    return Batch(images, targets, coarse)


def loss_and_grads(network: MiniPSP, batch: Batch) -> tuple[float, dict[str, ConvGrads]]:
    logits, cache = network.forward(batch.images, batch.coarse)
    loss, grad_logits = softmax_ce_ignore(logits, batch.targets)
    return loss, network.backward(cache, grad_logits)


@dataclass
class MetricsRow:
    iter: int
    lr: float
    loss: float
    val_miou: float | None = None

    def as_csv(self) -> list[str]:
        return [str(self.iter), repr(self.lr), repr(self.loss), "" if self.val_miou is None else repr(self.val_miou)]


@dataclass
class MetricsLog:
    """ CSV log started fresh for each run, then appended per row; rows are also kept in memory. """

    path: Path | None = None
    rows: list[MetricsRow] = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as handle:
                csv.writer(handle).writerow(METRICS_COLUMNS)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as handle:
                csv.writer(handle).writerow(row.as_csv())


def _check_training_set(kind: ModelKind, dataset: list[SampleTriplet], net_cfg: NetworkConfig) -> None:
    if not dataset:
        raise DataError("training set is empty")
    if kind is ModelKind.DETAILER:
        if not net_cfg.is_detailer:
            raise ConfigError("a detailer needs an injection point other than 'none'")
        if any(t.coarse is None for t in dataset):
            raise DataError("detailer training needs a coarse mask for every triplet")
    elif net_cfg.is_detailer:
        raise ConfigError(f"a classifier needs injection 'none', got '{net_cfg.injection.value}'")


def train(kind, dataset: list[SampleTriplet], cfg: TrainConfig, net_cfg: NetworkConfig,
          val_set: list[SampleTriplet] | None = None, out_dir=None) -> tuple[TrainState, list[MetricsRow]]:
    """
    Run cfg.total_iters mini-batches sampled with replacement from the augmented training set.

    The loss always compares against the fine mask of each triplet. When
    out_dir is given, metrics.csv and checkpoint/ are written there.

    Args:
        - kind: ModelKind or its string value
        - dataset: training triplets
        - cfg: optimisation recipe
        - net_cfg: architecture (its seed drives initialisation)
        - val_set: optional validation triplets, scored every cfg.eval_every iterations and at the end
        - out_dir: optional output directory

    Raises:
        - ConfigError / DataError: invalid combination, before any compute
        - TrainingError: the loss or a gradient became non-finite

    Returns:
        - (final TrainState, metrics rows)
    """
    kind = ModelKind(kind)
    _check_training_set(kind, dataset, net_cfg)
    net_cfg.check_crop(cfg.crop)

    network = MiniPSP(net_cfg, normalization=channel_stats(dataset))
    state = TrainState.fresh(network, cfg.seed)
    out_dir = None if out_dir is None else Path(out_dir)
    log = MetricsLog(None if out_dir is None else out_dir / "metrics.csv")
    with_coarse = kind is ModelKind.DETAILER
    logger.info("training %s on %d triplets for %d iterations", kind.value, len(dataset), cfg.total_iters)

    for t in range(cfg.total_iters):
        lr = poly_lr(t, cfg)
        indices = state.rng.integers(0, len(dataset), cfg.batch_size)
        seeds = state.rng.integers(0, 2 ** 32, cfg.batch_size)
        batch = make_batch(dataset, indices, seeds, cfg.crop, network.normalization, with_coarse)
        loss, grads = loss_and_grads(network, batch)
        if not np.isfinite(loss):
            logger.error("loss diverged at iteration %d", t)
            raise TrainingError(f"loss became {loss} at iteration {t}")
        if cfg.grad_clip is not None:
            grads, _ = clip_gradients(grads, cfg.grad_clip)
        sgd_step(state, grads, lr, cfg.momentum)

        val_miou = None
        last = t + 1 == cfg.total_iters
        if val_set and cfg.eval_every and ((t + 1) % cfg.eval_every == 0 or last):
            val_miou = evaluation.evaluate_model(network, val_set, use_coarse_input=with_coarse).miou
            logger.info("iteration %d: validation mIoU %.4f", t + 1, val_miou)
        log.append(MetricsRow(t, lr, loss, val_miou))
        if t % cfg.log_every == 0 or last:
            logger.info("iteration %d: loss %.5f lr %.6f", t, loss, lr)

    if out_dir is not None:
        save_checkpoint(network, out_dir / "checkpoint")
    return state, log.rows
