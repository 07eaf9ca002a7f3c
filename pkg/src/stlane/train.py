"""Mini-batch SGD with momentum and per-epoch exponential learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as net
from .checkpoint import save_checkpoint
from .data import ImageSequence, pixel_counts
from .metrics import ConfusionCounts, LossConfig, Metrics, class_weights, confusion, metrics, weighted_bce_logits
from .nn import NonFiniteError, ParamStore, make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    decay: float = 0.95
    momentum: float = 0.9
    batch_size: int = 4          # 64 suits multi-GPU runs; 4 fits a CPU
    epochs: int = 50
    seed: int = 0
    strides: tuple[int, ...] = (1, 2, 3)
    target_f1: float | None = None  # stop once the monitored F1 reaches this

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay ** epoch


class TrainingDiverged(RuntimeError):
    pass


def sgd_momentum_step(params: ParamStore, velocities: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """``v <- momentum*v + grad; p <- p - lr*v``; grads are zeroed afterwards.

    Nothing is updated if any gradient is non-finite.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}; step aborted")
    for p in params:
        v = velocities.get(p.name)
        if v is None:
            v = velocities[p.name] = np.zeros_like(p.value)
        v *= momentum
        v += p.grad
        p.value -= np.asarray(lr, dtype=p.value.dtype) * v
        p.grad[...] = 0


def _batch(seqs: list[ImageSequence]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.frames for s in seqs]), np.stack([s.mask for s in seqs])


def evaluate(params: ParamStore, config: net.ModelConfig, sequences: list[ImageSequence],
             batch_size: int = 4, region: bool = False) -> tuple[ConfusionCounts, list[np.ndarray]]:
    """Summed confusion counts and per-sequence lane probability maps.

    With ``region=True`` only pixels in each sequence's ``region`` are counted.
    """
    total = ConfusionCounts(0, 0, 0, 0)
    probs = []
    for i in range(0, len(sequences), batch_size):
        chunk = sequences[i:i + batch_size]
        frames, masks = _batch(chunk)
        logits = net.forward(frames, params, config).logits
        pred = net.predict_mask(logits)
        for k, s in enumerate(chunk):
            if region:
                if s.region is None:
                    continue
                total = total + confusion(pred[k], masks[k], s.region)
            else:
                total = total + confusion(pred[k], masks[k])
        probs.extend(net.lane_probability(logits))
    return total, probs


@dataclass
class TrainResult:
    params: ParamStore
    best_params: ParamStore
    best_f1: float
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    checkpoint: Path | None = None
    halted: bool = False

    @property
    def log_lines(self) -> list[str]:
        return [format_log_line(*row) for row in self.history]


def format_log_line(epoch: int, lr: float, loss: float, acc: float, f1: float) -> str:
    return f"{epoch} {lr:.8g} {loss:.8f} {acc:.6f} {f1:.6f}"


def train(train_set: list[ImageSequence], config: net.ModelConfig, tcfg: TrainConfig,
          out_dir=None, val_set: list[ImageSequence] | None = None, params: ParamStore | None = None,
          loss_cfg: LossConfig | None = None) -> TrainResult:
    """Train from ``params`` (or a seeded init) and keep the best-F1 weights.

    Writes ``best.ckpt`` and appends ``epoch lr loss acc f1`` lines to
    ``train.log`` under ``out_dir`` when given. F1 is monitored on
    ``val_set`` if provided, otherwise on the training set.
    """
    if not train_set:
        raise ValueError("training set is empty")
    params = params if params is not None else net.init_parameters(config, tcfg.seed)
    if loss_cfg is None:
        loss_cfg = class_weights(*pixel_counts(train_set))
    monitor = val_set if val_set else train_set
    out = Path(out_dir) if out_dir is not None else None
    ckpt = log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "best.ckpt"
        log_path = out / "train.log"
        save_checkpoint(params, config, ckpt)

    velocities: dict[str, np.ndarray] = {}
    best = params.copy()
    best_f1 = -1.0
    result = TrainResult(params, best, best_f1, checkpoint=ckpt)
    rng = make_rng(tcfg.seed + 1)
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr(epoch)
        order = rng.permutation(len(train_set))
        losses = []
        try:
            for i in range(0, len(order), tcfg.batch_size):
                frames, masks = _batch([train_set[j] for j in order[i:i + tcfg.batch_size]])
                fwd = net.forward(frames, params, config)
                loss, dlogits = weighted_bce_logits(fwd.logits, masks, loss_cfg)
                if not np.isfinite(loss):
                    raise NonFiniteError(f"loss is {loss} at epoch {epoch}")
                net.backward(dlogits, fwd, params)
                sgd_momentum_step(params, velocities, lr, tcfg.momentum)
                losses.append(loss)
        except NonFiniteError as exc:
            log.error("training halted: %s", exc)
            result.halted = True
            break
        counts, _ = evaluate(params, config, monitor, tcfg.batch_size)
        m = metrics(counts)
        row = (epoch, lr, float(np.mean(losses)), m.accuracy, m.f1)
        result.history.append(row)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(format_log_line(*row) + "\n")
        log.info("epoch %d lr %.5g loss %.5f acc %.4f f1 %.4f", *row)
        if m.f1 > best_f1:
            best_f1 = m.f1
            best = params.copy()
            if ckpt is not None:
                save_checkpoint(best, config, ckpt)
        if tcfg.target_f1 is not None and m.f1 >= tcfg.target_f1:
            break
    result.best_params = best
    result.best_f1 = best_f1
    return result


def evaluate_metrics(params: ParamStore, config: net.ModelConfig, sequences, batch_size: int = 4) -> Metrics:
    counts, _ = evaluate(params, config, list(sequences), batch_size)
    return metrics(counts)
