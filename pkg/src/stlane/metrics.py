"""Weighted cross-entropy loss and pixel-level evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ShapeError


@dataclass(frozen=True)
class LossConfig:
    w_l: float = 1.0
    w_nl: float = 1.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.w_l <= 0 or self.w_nl <= 0:
            raise ValueError(f"class weights must be positive, got w_l={self.w_l}, w_nl={self.w_nl}")


def weighted_bce(prob: np.ndarray, target: np.ndarray, cfg: LossConfig):
    """Mean weighted binary cross-entropy on lane probabilities.

    Returns ``(loss, dprob)``. Probabilities are clamped to
    ``[eps, 1 - eps]``; clamped entries get zero gradient.
    """
    if prob.shape != target.shape:
        raise ShapeError(f"probability map {prob.shape} and target {target.shape} differ")
    prob = np.asarray(prob, dtype=np.float64)
    y = target.astype(np.float64)
    p = np.clip(prob, cfg.epsilon, 1 - cfg.epsilon)
    m = prob.size
    loss = -(cfg.w_l * y * np.log(p) + cfg.w_nl * (1 - y) * np.log(1 - p)).sum() / m
    dprob = -(cfg.w_l * y / p - cfg.w_nl * (1 - y) / (1 - p)) / m
    dprob = dprob * ((prob > cfg.epsilon) & (prob < 1 - cfg.epsilon))
    return float(loss), dprob


def _bce_logit_terms(logits: np.ndarray, target: np.ndarray, cfg: LossConfig):
    if logits.shape[-3] != 2 or logits.shape[:-3] + logits.shape[-2:] != target.shape:
        raise ShapeError(f"logits {logits.shape} do not match target {target.shape}")
    d = (logits[..., 1, :, :] - logits[..., 0, :, :]).astype(np.float64)
    y = target.astype(np.float64)
    log_eps = np.log(cfg.epsilon)
    log_p = -np.logaddexp(0.0, -d)
    log_q = -np.logaddexp(0.0, d)
    terms = -(cfg.w_l * y * np.maximum(log_p, log_eps) + cfg.w_nl * (1 - y) * np.maximum(log_q, log_eps))
    return d, y, log_p, log_q, terms


def weighted_bce_terms(logits: np.ndarray, target: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Per-pixel loss contributions (float64); their mean is the loss."""
    return _bce_logit_terms(logits, target, cfg)[4]


def weighted_bce_logits(logits: np.ndarray, target: np.ndarray, cfg: LossConfig):
    """Loss on two-channel logits ``(..., 2, H, W)`` via the channel softmax.

    Evaluated in log-sigmoid form at float64 so saturated logits stay finite;
    the clamp acts on the log-probabilities. Returns ``(loss, dlogits)``.
    """
    d, y, log_p, log_q, terms = _bce_logit_terms(logits, target, cfg)
    log_eps = np.log(cfg.epsilon)
    m = d.size
    loss = terms.sum() / m
    p = np.exp(log_p)
    q = np.exp(log_q)
    dd = -(cfg.w_l * y * q * (log_p > log_eps) - cfg.w_nl * (1 - y) * p * (log_q > log_eps)) / m
    dlogits = np.stack([-dd, dd], axis=-3).astype(logits.dtype)
    return float(loss), dlogits


def class_weights(lane_pixels: int, total_pixels: int, epsilon: float = 1e-7) -> LossConfig:
    """Normalized inverse-frequency weights: w_l*P_lane + w_nl*P_bg == P_total."""
    bg = total_pixels - lane_pixels
    if lane_pixels <= 0:
        raise ValueError("dataset has no lane pixels; class weights are undefined")
    if bg <= 0:
        raise ValueError("dataset has no background pixels; class weights are undefined")
    return LossConfig(total_pixels / (2 * lane_pixels), total_pixels / (2 * bg), epsilon)


def class_weights_from_dataset(masks) -> LossConfig:
    lane = total = 0
    for m in masks:
        m = np.asarray(m)
        lane += int(np.count_nonzero(m))
        total += m.size
    if total == 0:
        raise ValueError("dataset is empty")
    return class_weights(lane, total)


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> ConfusionCounts:
    """Pixel confusion counts, optionally restricted to a boolean ``region``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = pred != 0
    g = gt != 0
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != pred.shape:
            raise ShapeError(f"region {region.shape} does not match masks {pred.shape}")
        p = p[region]
        g = g[region]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size) - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_lines(self, prefix: str = "") -> list[str]:
        return [f"{prefix}{k}={v:.6f}" for k, v in vars(self).items()]


def metrics(counts: ConfusionCounts) -> Metrics:
    """Accuracy, precision, recall and F1; zero denominators give 0."""
    total = counts.total
    accuracy = (counts.tp + counts.tn) / total if total else 0.0
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(accuracy, precision, recall, f1)


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PRCurveConfig:
    """``V`` thresholds per image; ``grid='quantile'`` or ``'fixed'``."""

    V: int = 100
    recall_0: float = 0.0
    precision_0: float = 1.0
    grid: str = "quantile"

    def __post_init__(self):
        if self.V < 1:
            raise ValueError(f"V must be >= 1, got {self.V}")
        if self.grid not in ("quantile", "fixed"):
            raise ValueError(f"unknown threshold grid {self.grid!r}")


def thresholds(prob: np.ndarray, cfg: PRCurveConfig) -> np.ndarray:
    """V+1 decreasing thresholds at levels V/V, (V-1)/V, ..., 0.

    In quantile mode each threshold is an order statistic of ``prob`` (lower
    rank, no interpolation) so the sweep depends only on the pixel ranking.
    """
    levels = np.arange(cfg.V, -1, -1) / cfg.V
    if cfg.grid == "fixed":
        return levels
    flat = np.sort(np.asarray(prob).ravel())
    idx = np.floor(levels * (flat.size - 1)).astype(int)
    return flat[idx]


def pr_curve(prob: np.ndarray, gt: np.ndarray, cfg: PRCurveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Precision/recall at each threshold (``p >= t`` is lane), anchor prepended."""
    g = np.asarray(gt) != 0
    positives = int(np.count_nonzero(g))
    precisions = [cfg.precision_0]
    recalls = [cfg.recall_0]
    for t in thresholds(prob, cfg):
        p = prob >= t
        tp = int(np.count_nonzero(p & g))
        npred = int(np.count_nonzero(p))
        precisions.append(tp / npred if npred else 0.0)
        recalls.append(tp / positives if positives else 0.0)
    return np.array(precisions), np.array(recalls)


def average_precision(prob: np.ndarray, gt: np.ndarray, cfg: PRCurveConfig = PRCurveConfig()) -> float:
    if np.shape(prob) != np.shape(gt):
        raise ShapeError(f"probability map {np.shape(prob)} and ground truth {np.shape(gt)} differ")
    precision, recall = pr_curve(np.asarray(prob), gt, cfg)
    return float(np.sum(precision[1:] * np.diff(recall)))


def mean_average_precision(prob_maps, gts, cfg: PRCurveConfig = PRCurveConfig()) -> float:
    prob_maps = list(prob_maps)
    gts = list(gts)
    if not prob_maps:
        raise ValueError("mean_average_precision needs at least one frame")
    if len(prob_maps) != len(gts):
        raise ValueError(f"{len(prob_maps)} probability maps but {len(gts)} ground truths")
    return float(np.mean([average_precision(p, g, cfg) for p, g in zip(prob_maps, gts)]))
