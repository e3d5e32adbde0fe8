"""
ConfProbe Probability Core

Gaussian CDF and inverse, the Gaussian (probit) and transfer confidence
models, the empirical CDF type and the multiclass residual rule.
Everything here is pure; values are immutable once built.
"""

import json
from dataclasses import dataclass
from typing import Optional, Union, Sequence

import numpy as np
from scipy import special

from .errors import DomainError, ConfigError, ErrorCode

ArrayLike = Union[float, Sequence[float], np.ndarray]

# A confidence is a probability in [0, 1]
Confidence = float


def _out(values: np.ndarray, like) -> Union[float, np.ndarray]:
    """Return a Python float for scalar input, an array otherwise"""
    if np.ndim(like) == 0:
        return float(values)
    return values


def _check_open_unit(p: np.ndarray, name: str = "p"):
    if not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError(f"{name} must lie strictly inside (0, 1)")


def std_normal_cdf(x: ArrayLike) -> Union[float, np.ndarray]:
    """Standard normal CDF Φ(x)"""
    arr = np.asarray(x, dtype=float)
    return _out(special.ndtr(arr), x)


def std_normal_inv_cdf(p: ArrayLike) -> Union[float, np.ndarray]:
    """Inverse standard normal CDF Φ⁻¹(p) for p in (0, 1)"""
    arr = np.asarray(p, dtype=float)
    _check_open_unit(arr)
    return _out(special.ndtri(arr), p)


def gaussian_confidence(p_a: ArrayLike, a: float) -> Union[float, np.ndarray]:
    """Gaussian model: 1 / (1 + exp(-a Φ⁻¹(p_a)))"""
    if a <= 0:
        raise DomainError(f"a must be positive, got {a}")
    arr = np.asarray(p_a, dtype=float)
    _check_open_unit(arr, "p_a")
    return _out(special.expit(a * special.ndtri(arr)), p_a)


def transfer_confidence(p_a: ArrayLike, a: float, cdf: "EmpiricalCdf") -> Union[float, np.ndarray]:
    """Transfer model: 1 / (1 + exp(a F_n⁻¹(1 - p_a)))

    a = 0 is accepted and maps everything to 0.5.
    """
    if a < 0:
        raise DomainError(f"a must be non-negative, got {a}")
    arr = np.asarray(p_a, dtype=float)
    _check_open_unit(arr, "p_a")
    return _out(special.expit(-a * cdf.inverse(1.0 - arr)), p_a)


@dataclass(frozen=True, eq=False)
class EmpiricalCdf:
    """Empirical CDF over sorted samples (duplicates kept as weighted steps)"""
    points: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2 or len(self.points) != self.n:
            raise DomainError("EmpiricalCdf needs n >= 2 points", code=ErrorCode.TOO_FEW_SAMPLES)
        points = np.array(self.points, dtype=float)
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @classmethod
    def from_samples(cls, samples: ArrayLike) -> "EmpiricalCdf":
        values = np.sort(np.asarray(samples, dtype=float).ravel())
        if not np.all(np.isfinite(values)):
            raise DomainError("EmpiricalCdf samples must be finite")
        return cls(points=values, n=int(values.size))

    @property
    def plotting_positions(self) -> np.ndarray:
        """(i - 0.5) / n for i = 1..n"""
        return (np.arange(self.n) + 0.5) / self.n

    def evaluate(self, x: ArrayLike) -> Union[float, np.ndarray]:
        """F_n(x) = #{points <= x} / n"""
        counts = np.searchsorted(self.points, np.asarray(x, dtype=float), side="right")
        return _out(counts / self.n, x)

    def inverse(self, q: ArrayLike) -> Union[float, np.ndarray]:
        """Piecewise-linear inverse at plotting positions, tails clipped to min/max"""
        arr = np.asarray(q, dtype=float)
        if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
            raise DomainError("q must lie in [0, 1]")
        return _out(np.interp(arr, self.plotting_positions, self.points), q)

    def to_dict(self) -> dict:
        return {"n": self.n, "points": [float(v) for v in self.points]}

    @classmethod
    def from_dict(cls, data: dict) -> "EmpiricalCdf":
        try:
            points = np.asarray(data["points"], dtype=float)
            n = int(data["n"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed EmpiricalCdf document: {e}")
        if np.any(np.diff(points) < 0):
            raise ConfigError("EmpiricalCdf points must be sorted ascending")
        return cls(points=points, n=n)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "EmpiricalCdf":
        return cls.from_dict(json.loads(text))


def ecdf_inverse(cdf: EmpiricalCdf, q: ArrayLike) -> Union[float, np.ndarray]:
    """F_n⁻¹(q) under the plotting-position interpolation rule"""
    return cdf.inverse(q)


@dataclass(frozen=True, eq=False)
class CalibrationModel:
    """Maps p_A to a confidence: Gaussian{a} or Transfer{a, cdf}"""
    kind: str
    a: float
    cdf: Optional[EmpiricalCdf] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "transfer"):
            raise ConfigError(f"Unknown calibration model '{self.kind}'")
        if not self.a > 0:
            raise ConfigError(f"Calibration model needs a > 0, got {self.a}")
        if self.kind == "transfer" and self.cdf is None:
            raise ConfigError("Transfer model needs an EmpiricalCdf")

    @classmethod
    def gaussian(cls, a: float) -> "CalibrationModel":
        return cls(kind="gaussian", a=a)

    @classmethod
    def transfer(cls, a: float, cdf: EmpiricalCdf) -> "CalibrationModel":
        return cls(kind="transfer", a=a, cdf=cdf)

    def confidence(self, p_a: ArrayLike) -> Union[float, np.ndarray]:
        if self.kind == "gaussian":
            return gaussian_confidence(p_a, self.a)
        return transfer_confidence(p_a, self.a, self.cdf)

    def to_dict(self) -> dict:
        data = {"kind": self.kind, "a": self.a}
        if self.cdf is not None:
            data["cdf"] = self.cdf.to_dict()
        return data


def spread_residual(conf: float, num_classes: int, predicted: int = 0) -> np.ndarray:
    """Full probability vector: conf on the predicted class, the rest shared equally"""
    if num_classes < 2:
        raise DomainError("num_classes must be at least 2")
    if not 0.0 <= conf <= 1.0:
        raise DomainError(f"confidence must lie in [0, 1], got {conf}")
    probs = np.full(num_classes, (1.0 - conf) / (num_classes - 1))
    probs[predicted] = conf
    return probs
