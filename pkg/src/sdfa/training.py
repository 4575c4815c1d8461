"""SGD-momentum training, evaluation and result files."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, TrainingError
from .metrics import METRIC_COLUMNS, MetricsReport, compute_metrics
from .model import SdfaModel, forward, predict_proba
from .nn.runtime import retain_large_allocations
from .skeleton_data import SkeletonSequence, prepare_batch

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    decay_factor: float = 0.9  # "10% less" every decay_every epochs; 0.1 gives step decay
    decay_every: int = 10
    batch_size: int = 16
    seed: int = 0
    p_joint: float | None = None  # overrides the model's mask probabilities when set
    p_frame: float | None = None

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.decay_every < 1 or self.decay_factor <= 0:
            raise ConfigError("decay_every must be >= 1 and decay_factor positive")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float


@dataclass
class PreparedData:
    X: np.ndarray  # (N, C, T, V)
    y: np.ndarray  # (N,), fall = 1

    def __len__(self) -> int:
        return len(self.y)


def prepare_dataset(seqs: Sequence[SkeletonSequence], model: SdfaModel) -> PreparedData:
    X, y = prepare_batch(seqs, model.config.target_length, channels=model.config.in_channels,
                         dtype=model.dtype)
    return PreparedData(X, y)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def sgd_step(params: Sequence[nn.Param], lr: float, momentum: float) -> None:
    """Classic momentum: ``v = momentum * v + g``, ``p -= lr * v`` (in place)."""
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        p.data -= p.data.dtype.type(lr) * p.velocity


def train(model: SdfaModel, data: PreparedData | Sequence[SkeletonSequence],
          split: tuple[Sequence[int], Sequence[int]], cfg: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[SdfaModel, list[EpochRecord]]:
    """Fit ``model`` in place on the train half of ``split``.

    Batches are reshuffled every epoch and masks drawn from generators
    derived from ``cfg.seed`` only, so a run is reproducible bit for bit.
    """
    cfg.validate()
    retain_large_allocations()
    if not isinstance(data, PreparedData):
        data = prepare_dataset(data, model)
    train_idx = np.asarray(split[0], dtype=np.int64)
    if train_idx.size == 0:
        raise TrainingError("empty training split")
    if not np.isfinite(data.X[train_idx]).all():
        raise TrainingError("training features contain NaN or Inf")
    if cfg.p_joint is not None:
        model.config.p_joint = cfg.p_joint
    if cfg.p_frame is not None:
        model.config.p_frame = cfg.p_frame
    model.config.validate()

    shuffle_seed, mask_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    mask_rng = np.random.default_rng(mask_seed)
    params = model.params()
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        total_loss, correct = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            with nn.Tape() as tape:
                logits = forward(model, nn.Tensor(data.X[batch]), training=True, rng=mask_rng)
                loss, probs = nn.softmax_cross_entropy(logits, data.y[batch])
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            sgd_step(params, lr, cfg.momentum)
            total_loss += float(loss.data) * batch.size
            correct += int(np.sum(probs.argmax(axis=1) == data.y[batch]))
        record = EpochRecord(epoch, lr, total_loss / order.size, correct / order.size)
        history.append(record)
        logger.info("epoch %d lr %.6f loss %.4f acc %.3f", epoch, lr, record.train_loss, record.train_acc)
        if on_epoch is not None:
            on_epoch(record)
    return model, history


def fall_scores(model: SdfaModel, data: PreparedData, indices: Sequence[int] | None = None,
                batch_size: int = 16) -> np.ndarray:
    X = data.X if indices is None else data.X[np.asarray(indices)]
    return predict_proba(model, X, batch_size=batch_size)[:, 1]


def evaluate(model: SdfaModel, data: PreparedData, indices: Sequence[int],
             threshold: float = 0.5) -> MetricsReport:
    indices = np.asarray(indices, dtype=np.int64)
    return compute_metrics(fall_scores(model, data, indices), data.y[indices], threshold)


# ---------------------------------------------------------------------------
# Text outputs


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    lines = ["epoch\tlr\ttrain_loss\ttrain_acc"]
    lines += [f"{h.epoch}\t{h.lr:.8g}\t{h.train_loss:.6f}\t{h.train_acc:.6f}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n")


RESULT_HEADER = ("protocol", "fold") + METRIC_COLUMNS + ("tp", "fp", "tn", "fn", "config_digest", "seed")


def format_results(records: Sequence[dict]) -> str:
    """Tab-separated table; metric columns are percentages as in the usual results table."""
    lines = ["\t".join(RESULT_HEADER)]
    for r in records:
        m: MetricsReport = r["metrics"]
        cells = [str(r["protocol"]), str(r.get("fold", ""))]
        cells += [f"{100 * getattr(m, c):.2f}" for c in METRIC_COLUMNS]
        cells += [str(m.tp), str(m.fp), str(m.tn), str(m.fn), r.get("config_digest", ""), str(r.get("seed", ""))]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
