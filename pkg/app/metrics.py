"""
ConfProbe Calibration Metrics
Accuracy, ECE, Brier, AUROC, reliability bins and Pearson correlation
"""

import csv
import io
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Dict, Optional

import numpy as np
from scipy import stats

from . import activity
from .errors import UndefinedMetricError, DomainError, ErrorCode
from .prob_core import spread_residual

NUM_BINS = 15


@dataclass(frozen=True)
class ScoredPrediction:
    confidence: float
    predicted: int
    truth: int
    num_classes: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DomainError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.num_classes < 2:
            raise DomainError("num_classes must be at least 2")
        for name in ("predicted", "truth"):
            value = getattr(self, name)
            if not 0 <= value < self.num_classes:
                raise DomainError(f"{name} label {value} outside [0, {self.num_classes})")

    @property
    def correct(self) -> bool:
        return self.predicted == self.truth


@dataclass
class ReliabilityBins:
    """15 equal-width bins over [0, 1]; bin b covers (edge_b, edge_b+1], the first also holds 0"""
    bin_edges: np.ndarray
    counts: np.ndarray
    mean_conf: np.ndarray
    accuracy: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["bin_center", "count", "mean_conf", "acc"])
        for center, count, conf, acc in zip(self.centers, self.counts, self.mean_conf, self.accuracy):
            writer.writerow([f"{center:.6f}", int(count), f"{conf:.6f}", f"{acc:.6f}"])
        return out.getvalue()


def _arrays(preds: Sequence[ScoredPrediction]) -> Tuple[np.ndarray, np.ndarray]:
    if len(preds) == 0:
        raise UndefinedMetricError("Metric needs at least one prediction", code=ErrorCode.EMPTY_INPUT)
    conf = np.array([p.confidence for p in preds], dtype=float)
    correct = np.array([p.correct for p in preds], dtype=bool)
    return conf, correct


def accuracy(preds: Sequence[ScoredPrediction]) -> float:
    _, correct = _arrays(preds)
    return float(correct.mean())


def reliability_bins(preds: Sequence[ScoredPrediction], num_bins: int = NUM_BINS) -> ReliabilityBins:
    conf, correct = _arrays(preds)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    # Right-closed bins; 0 falls into the first
    index = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, num_bins - 1)
    counts = np.bincount(index, minlength=num_bins)
    conf_sum = np.bincount(index, weights=conf, minlength=num_bins)
    hit_sum = np.bincount(index, weights=correct.astype(float), minlength=num_bins)
    nonempty = counts > 0
    mean_conf = np.zeros(num_bins)
    acc = np.zeros(num_bins)
    mean_conf[nonempty] = conf_sum[nonempty] / counts[nonempty]
    acc[nonempty] = hit_sum[nonempty] / counts[nonempty]
    return ReliabilityBins(bin_edges=edges, counts=counts, mean_conf=mean_conf, accuracy=acc)


def ece(preds: Sequence[ScoredPrediction], num_bins: int = NUM_BINS) -> float:
    """Sum over bins of (n_b / N) |acc_b - conf_b|"""
    bins = reliability_bins(preds, num_bins)
    weights = bins.counts / bins.counts.sum()
    return float(np.sum(weights * np.abs(bins.accuracy - bins.mean_conf)))


def brier(preds: Sequence[ScoredPrediction]) -> float:
    """Mean squared distance between the spread probability vector and the one-hot truth"""
    _arrays(preds)
    total = 0.0
    for p in preds:
        residual = spread_residual(p.confidence, p.num_classes, p.predicted)
        residual[p.truth] -= 1.0
        total += float(np.dot(residual, residual))
    return total / len(preds)


def auroc(preds: Sequence[ScoredPrediction]) -> float:
    """Mann-Whitney AUROC of confidence separating correct from incorrect, ties count 0.5"""
    conf, correct = _arrays(preds)
    n_pos = int(correct.sum())
    n_neg = len(correct) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both correct and incorrect predictions",
                                   code=ErrorCode.DEGENERATE)
    if np.all(conf == conf[0]):
        activity.metric_warning("auroc", "all confidences tie, reporting 0.5")
        return 0.5
    ranks = stats.rankdata(conf)
    u = ranks[correct].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float]:
    """Sample Pearson r and its two-sided p-value from Student's t with n - 2 dof"""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise UndefinedMetricError("pearson_r needs two equal-length sequences", code=ErrorCode.EMPTY_INPUT)
    if len(x) < 3:
        raise UndefinedMetricError("pearson_r needs at least 3 points", code=ErrorCode.EMPTY_INPUT)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("pearson_r undefined for zero variance", code=ErrorCode.DEGENERATE)
    r = float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    dof = len(x) - 2
    if abs(r) == 1.0:
        return r, 0.0
    t_stat = r * np.sqrt(dof / (1.0 - r * r))
    return r, float(2 * stats.t.sf(abs(t_stat), dof))


def score_predictions(confidences: Sequence[float], predicted: Sequence[int],
                      truths: Sequence[int], num_classes: int) -> List[ScoredPrediction]:
    return [ScoredPrediction(float(c), int(p), int(t), num_classes)
            for c, p, t in zip(confidences, predicted, truths)]


def metrics_summary(preds: Sequence[ScoredPrediction]) -> Dict[str, Optional[float]]:
    """acc / ece / auroc / brier; auroc is None when undefined"""
    try:
        roc = auroc(preds)
    except UndefinedMetricError as e:
        activity.metric_warning("auroc", str(e))
        roc = None
    return {"acc": accuracy(preds), "ece": ece(preds), "auroc": roc, "brier": brier(preds)}
