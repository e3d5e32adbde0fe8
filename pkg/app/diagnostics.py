"""
ConfProbe White-box Diagnostics

Latent-noise collection on a synthetic model, per-sample empirical
cumulatives, the Var (spread) and KS (Gaussian misfit) statistics, and
learning the transfer model's empirical CDF.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import List, Optional, Sequence, Tuple, Dict

import numpy as np
from scipy import special

from . import activity
from .errors import DomainError, ErrorCode
from .oracle import SyntheticModel, require_white_box, runner_up, latent_margins
from .prob_core import EmpiricalCdf
from .transforms import TransformSpec, sample_transforms

GRID_POINTS = 512
ENVELOPE = (2.5, 97.5)
MIN_TRANSFER_DRAWS = 100


def default_a_grid(size: int = 50) -> np.ndarray:
    """Log-spaced scale grid over [0.001, 100]"""
    return np.logspace(-3, 2, size)


@dataclass
class LatentNoiseSample:
    """Margin shifts latent_margin(T(x)) - latent_margin(x) for one image"""
    sample_id: int
    draws: np.ndarray
    class_a: int = 0
    class_b: int = 1


@dataclass
class CdfEnsemble:
    grid: np.ndarray
    cdfs: np.ndarray            # samples x grid
    mean: np.ndarray
    q_low: np.ndarray
    q_high: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[LatentNoiseSample], grid_points: int = GRID_POINTS) -> "CdfEnsemble":
        if len(samples) == 0:
            raise DomainError("CdfEnsemble needs at least one sample", code=ErrorCode.TOO_FEW_SAMPLES)
        sorted_draws = [np.sort(np.asarray(s.draws, dtype=float)) for s in samples]
        if any(d.size == 0 for d in sorted_draws):
            raise DomainError("Every sample needs at least one draw", code=ErrorCode.TOO_FEW_SAMPLES)
        lo = min(d[0] for d in sorted_draws)
        hi = max(d[-1] for d in sorted_draws)
        grid = np.linspace(lo, hi, grid_points)
        cdfs = np.stack([np.searchsorted(d, grid, side="right") / d.size for d in sorted_draws])
        q_low, q_high = np.percentile(cdfs, ENVELOPE, axis=0)
        return cls(grid=grid, cdfs=cdfs, mean=cdfs.mean(axis=0), q_low=q_low, q_high=q_high)

    def __len__(self) -> int:
        return self.cdfs.shape[0]

    def to_csv(self, fit_a: Optional[float] = None) -> str:
        """grid, mean, q2.5, q97.5 and the fitted Phi(x/a)"""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["x", "mean", "q2.5", "q97.5", "fitted"])
        fitted = special.ndtr(self.grid / fit_a) if fit_a else np.full(self.grid.shape, np.nan)
        for row in zip(self.grid, self.mean, self.q_low, self.q_high, fitted):
            writer.writerow([f"{v:.9g}" for v in row])
        return out.getvalue()


@dataclass
class DiagnosticStats:
    var_stat: float
    ks_stat: float
    best_fit_a: float
    samples: int = 0
    draws_per_sample: int = 0
    spec: Optional[Dict] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def collect_latent_noise(
    model,
    imgs: Sequence[np.ndarray],
    spec: TransformSpec,
    draws_per_sample: int,
    run_seed: int,
    start_index: int = 0,
    workers: int = 1,
) -> List[LatentNoiseSample]:
    """Margin shifts along (top-1, runner-up) of each clean image, one stream per image"""
    if not isinstance(model, SyntheticModel):
        model = require_white_box(model)
    if draws_per_sample < 1:
        raise DomainError("draws_per_sample must be at least 1", code=ErrorCode.TOO_FEW_SAMPLES)
    spec.validate()

    def one(i: int) -> LatentNoiseSample:
        img = np.asarray(imgs[i], dtype=float)
        class_a, class_b = runner_up(model, img)
        draws = np.stack(sample_transforms(img, spec, run_seed, start_index + i, range(draws_per_sample)))
        margins = latent_margins(model, np.concatenate([img[None], draws]), class_a, class_b)
        shifts = margins[1:] - margins[0]
        return LatentNoiseSample(sample_id=start_index + i, draws=shifts, class_a=class_a, class_b=class_b)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, range(len(imgs))))
    else:
        samples = [one(i) for i in range(len(imgs))]

    activity.log_info(f"DIAGNOSE: Collected {draws_per_sample} draws for {len(samples)} images ({spec.label()})")
    return samples


def var_statistic(ensemble: CdfEnsemble) -> float:
    """Largest gap between the 97.5 and 2.5 percentile envelopes"""
    if len(ensemble) < 2:
        raise DomainError("Var needs at least two samples", code=ErrorCode.TOO_FEW_SAMPLES)
    return float(np.max(ensemble.q_high - ensemble.q_low))


def ks_statistic(ensemble: CdfEnsemble, a_grid: Sequence[float]) -> Tuple[float, float]:
    """min over a of sup |F_mean(x) - Phi(x / a)|; ties go to the smaller a"""
    grid = np.sort(np.asarray(a_grid, dtype=float))
    if grid.size == 0:
        raise DomainError("ks_statistic needs a non-empty a grid")
    if np.any(grid <= 0):
        raise DomainError("a grid values must be positive")

    best_ks, best_a = np.inf, float(grid[0])
    for a in grid:
        distance = float(np.max(np.abs(ensemble.mean - special.ndtr(ensemble.grid / a))))
        if distance < best_ks:
            best_ks, best_a = distance, float(a)
    return best_ks, best_a


def diagnose(samples: Sequence[LatentNoiseSample], a_grid: Sequence[float],
             spec: Optional[TransformSpec] = None) -> Tuple[DiagnosticStats, CdfEnsemble]:
    ensemble = CdfEnsemble.from_samples(samples)
    var = var_statistic(ensemble)
    ks, best_a = ks_statistic(ensemble, a_grid)
    stats = DiagnosticStats(
        var_stat=var,
        ks_stat=ks,
        best_fit_a=best_a,
        samples=len(samples),
        draws_per_sample=int(len(samples[0].draws)),
        spec=spec.to_dict() if spec else None,
    )
    activity.log_info(f"DIAGNOSE: Var={var:.4f} KS={ks:.4f} a={best_a:.4g}")
    return stats, ensemble


def learn_transfer_cdf(samples: Sequence[LatentNoiseSample], min_draws: int = MIN_TRANSFER_DRAWS) -> EmpiricalCdf:
    """Pool every draw, shift to zero mean, and build the empirical CDF"""
    if len(samples) == 0:
        raise DomainError("No latent noise samples to pool", code=ErrorCode.TOO_FEW_SAMPLES)
    pooled = np.concatenate([np.asarray(s.draws, dtype=float).ravel() for s in samples])
    if pooled.size < min_draws:
        raise DomainError(f"Transfer CDF needs at least {min_draws} pooled draws, got {pooled.size}",
                          code=ErrorCode.TOO_FEW_SAMPLES)
    cdf = EmpiricalCdf.from_samples(pooled - pooled.mean())
    activity.log_info(f"DIAGNOSE: Learned transfer CDF from {cdf.n} draws")
    return cdf
