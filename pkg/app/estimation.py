"""
ConfProbe Estimation Pipeline

Estimates p_A by repeated transformed queries, fits the scale a (and
optionally the transform spec) by grid search on a validation split, and
assigns per-sample confidences.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, List, Dict, Sequence

import numpy as np

from . import activity
from .errors import ConfigError, ErrorCode
from .metrics import ece, brier, accuracy, score_predictions
from .oracle import Oracle
from .prob_core import CalibrationModel, EmpiricalCdf
from .transforms import TransformSpec, sample_transforms

# Scale values searched for a
A_GRID = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1, 10, 100]

ESTIMATE_COLUMNS = ["sample_id", "base_label", "matches", "S", "p_a_raw", "p_a_clipped", "confidence"]

# Objective values closer than this count as tied
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class PaEstimate:
    """Matches of S transformed queries against the clean top-1 label

    S = 0 is the naive single-query baseline; it has no p_A.
    """
    base_label: int
    matches: int
    samples_s: int
    sample_id: int = 0

    def __post_init__(self):
        if self.samples_s < 0 or not 0 <= self.matches <= self.samples_s:
            raise ConfigError(f"Need 0 <= matches <= S, got {self.matches}/{self.samples_s}")

    @property
    def naive(self) -> bool:
        return self.samples_s == 0

    @property
    def p_a_raw(self) -> Optional[float]:
        if self.naive:
            return None
        return self.matches / self.samples_s

    @property
    def p_a_clipped(self) -> Optional[float]:
        """p_A clamped to [1/(2S), 1 - 1/(2S)]"""
        if self.naive:
            return None
        edge = 1.0 / (2 * self.samples_s)
        return min(max(self.p_a_raw, edge), 1.0 - edge)


@dataclass
class FitResult:
    best_a: float
    best_spec: Optional[TransformSpec]
    objective_value: float
    model_kind: str = "gaussian"
    best_brier: float = 0.0
    search_trace: List[Dict] = field(default_factory=list)

    def model(self, cdf: Optional[EmpiricalCdf] = None) -> CalibrationModel:
        if self.model_kind == "transfer":
            return CalibrationModel.transfer(self.best_a, cdf)
        return CalibrationModel.gaussian(self.best_a)

    def to_dict(self) -> Dict:
        return {
            "best_a": self.best_a,
            "best_spec": self.best_spec.to_dict() if self.best_spec else None,
            "model_kind": self.model_kind,
            "objective": "ece",
            "objective_value": self.objective_value,
            "best_brier": self.best_brier,
            "search_trace": self.search_trace,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "FitResult":
        try:
            spec = data.get("best_spec")
            return cls(
                best_a=float(data["best_a"]),
                best_spec=TransformSpec.from_dict(spec) if spec else None,
                objective_value=float(data["objective_value"]),
                model_kind=data.get("model_kind", "gaussian"),
                best_brier=float(data.get("best_brier", 0.0)),
                search_trace=list(data.get("search_trace", [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed fit result: {e}")


def estimate_pa(oracle: Oracle, img: np.ndarray, spec: TransformSpec, s: int, run_seed: int,
                sample_index: int = 0) -> PaEstimate:
    """One clean query fixes A, then S transformed queries count matches

    Draws are produced before any of them is queried, and a failed query
    raises out of the batch so no partial count is kept.
    """
    if s < 0:
        raise ConfigError(f"S must be >= 0, got {s}")
    base_label = oracle.top1(img)
    if s == 0:
        return PaEstimate(base_label=base_label, matches=0, samples_s=0, sample_id=sample_index)

    draws = sample_transforms(img, spec, run_seed, sample_index, range(s))
    labels = oracle.top1_batch(draws)
    matches = sum(1 for label in labels if label == base_label)
    return PaEstimate(base_label=base_label, matches=matches, samples_s=s, sample_id=sample_index)


def estimate_many(oracle: Oracle, images: Sequence[np.ndarray], spec: TransformSpec, s: int,
                  run_seed: int, start_index: int = 0, workers: int = 1) -> List[PaEstimate]:
    """estimate_pa over consecutive sample ids; results keep input order at any worker count"""
    spec.validate()

    def one(i: int) -> PaEstimate:
        return estimate_pa(oracle, images[i], spec, s, run_seed, sample_index=start_index + i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            estimates = list(pool.map(one, range(len(images))))
    else:
        estimates = [one(i) for i in range(len(images))]

    activity.estimates_done(len(estimates), s, spec.label())
    return estimates


def assign_confidences(estimates: Sequence[PaEstimate], model: Optional[CalibrationModel]) -> List[float]:
    """Model confidence on clipped p_A; naive estimates get 1.0"""
    out = []
    for est in estimates:
        if est.naive:
            out.append(1.0)
        else:
            out.append(float(model.confidence(est.p_a_clipped)))
    return out


def _score(estimates: Sequence[PaEstimate], labels: Sequence[int], num_classes: int,
           model: CalibrationModel) -> Dict:
    confidences = assign_confidences(estimates, model)
    preds = score_predictions(confidences, [e.base_label for e in estimates], labels, num_classes)
    return {"ece": ece(preds), "brier": brier(preds), "acc": accuracy(preds)}


def grid_search(
    estimates_by_spec: Dict[TransformSpec, List[PaEstimate]],
    labels: Sequence[int],
    num_classes: int,
    model_kind: str = "gaussian",
    cdf: Optional[EmpiricalCdf] = None,
    a_grid: Optional[Sequence[float]] = None,
) -> FitResult:
    """Joint search over (spec, a): lowest ECE wins, lower Brier breaks ties, then grid order"""
    a_grid = list(a_grid) if a_grid else list(A_GRID)
    if not estimates_by_spec or any(len(est) == 0 for est in estimates_by_spec.values()):
        raise ConfigError("Cannot fit on an empty validation set", code=ErrorCode.EMPTY_SPLIT)
    if model_kind == "transfer" and cdf is None:
        raise ConfigError("Transfer model fitting needs an EmpiricalCdf", code=ErrorCode.MISSING_INPUT)

    best = None
    trace = []
    for spec, estimates in estimates_by_spec.items():
        if len(estimates) != len(labels):
            raise ConfigError(f"{len(estimates)} estimates but {len(labels)} labels")
        for a in a_grid:
            model = (CalibrationModel.transfer(a, cdf) if model_kind == "transfer"
                     else CalibrationModel.gaussian(a))
            scores = _score(estimates, labels, num_classes, model)
            trace.append({"a": a, "spec": spec.to_dict() if spec else None, **scores})
            if best is None or _better(scores, best[2]):
                best = (a, spec, scores)

    a, spec, scores = best
    result = FitResult(best_a=a, best_spec=spec, objective_value=scores["ece"], model_kind=model_kind,
                       best_brier=scores["brier"], search_trace=trace)
    activity.fit_completed(model_kind, a, spec.label() if spec else "-", scores["ece"])
    return result


def _better(scores: Dict, best: Dict) -> bool:
    if scores["ece"] < best["ece"] - TIE_TOLERANCE:
        return True
    if abs(scores["ece"] - best["ece"]) <= TIE_TOLERANCE:
        return scores["brier"] < best["brier"] - TIE_TOLERANCE
    return False


def fit_a(
    estimates: Sequence[PaEstimate],
    labels: Sequence[int],
    model_kind: str = "gaussian",
    cdf: Optional[EmpiricalCdf] = None,
    a_grid: Optional[Sequence[float]] = None,
    num_classes: Optional[int] = None,
    spec: Optional[TransformSpec] = None,
) -> FitResult:
    """Search a alone for estimates made under one transform spec"""
    if len(estimates) == 0:
        raise ConfigError("Cannot fit on an empty validation set", code=ErrorCode.EMPTY_SPLIT)
    if num_classes is None:
        num_classes = max(2, max(max(labels), max(e.base_label for e in estimates)) + 1)
    return grid_search({spec: list(estimates)}, labels, num_classes, model_kind, cdf, a_grid)


def planned_queries(m: int, n: int, s: int, num_specs: int = 1, fitting: bool = True) -> int:
    """Oracle lookups a run will issue: each estimate costs one clean query plus S draws"""
    per_sample = s + 1
    validation = m * num_specs * per_sample if fitting else 0
    return validation + n * per_sample


# ============== Estimates CSV ==============

def estimates_to_csv(estimates: Sequence[PaEstimate], confidences: Sequence[float]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(ESTIMATE_COLUMNS)
    for est, conf in zip(estimates, confidences):
        writer.writerow([
            est.sample_id,
            est.base_label,
            est.matches,
            est.samples_s,
            "" if est.naive else repr(est.p_a_raw),
            "" if est.naive else repr(est.p_a_clipped),
            repr(float(conf)),
        ])
    return out.getvalue()
