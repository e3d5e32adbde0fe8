"""
ConfProbe Prediction Oracles

Top-1 prediction sources: a white-box synthetic model, an HTTP client for a
remote /predict endpoint, a playback reader for recorded prediction logs,
and the append-only query cache every query is routed through.
"""

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, List, Dict, Tuple, Union, Sequence

import numpy as np
import requests
from scipy import ndimage, special

from . import activity
from .dataset import Dataset
from .errors import (
    ConfigError, OracleError, QueryError, MissingPredictionError,
    CapabilityError, ErrorCode,
)


def payload_bytes(img: np.ndarray) -> bytes:
    """Exact query payload: little-endian float32, row-major"""
    return np.ascontiguousarray(img, dtype="<f4").tobytes()


def content_hash(img: np.ndarray) -> str:
    """Hex SHA-256 of the payload bytes; this is the cache and playback key"""
    return hashlib.sha256(payload_bytes(img)).hexdigest()


def quantize(img: np.ndarray) -> np.ndarray:
    """The image the remote side actually sees (float32 precision)"""
    return np.asarray(img, dtype="<f4").astype(np.float64)


def ordered_dot(rows: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """rows @ matrix summed term by term in a fixed order

    Each output row depends only on its own input row, never on the batch
    it arrives in, so a model answer is a pure function of the image.
    """
    rows = np.asarray(rows, dtype=float)
    out = np.zeros((rows.shape[0], matrix.shape[1]))
    for k in range(matrix.shape[0]):
        out += rows[:, k, None] * matrix[k]
    return out


class Oracle:
    """Base class: top-1 label for an image of the declared shape"""

    white_box = False

    def __init__(self, shape: Optional[Tuple[int, int, int]] = None):
        self.shape = tuple(shape) if shape is not None else None

    def check_shape(self, img: np.ndarray):
        if self.shape is not None and tuple(np.shape(img)) != self.shape:
            raise ConfigError(f"Image shape {tuple(np.shape(img))} does not match oracle input {self.shape}",
                              code=ErrorCode.SHAPE_MISMATCH)

    def top1(self, img: np.ndarray) -> int:
        raise NotImplementedError

    def top1_batch(self, imgs: Sequence[np.ndarray]) -> List[int]:
        return [self.top1(img) for img in imgs]


# ============== Synthetic white-box model ==============

@dataclass(frozen=True, eq=False)
class SyntheticModel:
    """f = g(h(x)): encoder h(x) = s(x) J^T (x - offset), logits W h(x) + b

    s(x) = gain_offset + gain_scale * |x_1| when nonlinear, else 1.
    """
    encoder: np.ndarray          # d_in x d_lat
    weights: np.ndarray          # K x d_lat
    biases: np.ndarray           # K
    shape: Tuple[int, int, int]
    nonlinear: bool = False
    gain_offset: float = 0.5
    gain_scale: float = 1.0
    input_offset: float = 0.5

    def __post_init__(self):
        d_in = int(np.prod(self.shape))
        if self.encoder.ndim != 2 or self.encoder.shape[0] != d_in or self.encoder.shape[1] < 1:
            raise ConfigError(f"Encoder must be {d_in} x d_lat, got {self.encoder.shape}")
        if self.weights.ndim != 2 or self.weights.shape[1] != self.encoder.shape[1] or self.weights.shape[0] < 2:
            raise ConfigError(f"Weights must be K x {self.encoder.shape[1]} with K >= 2")
        if self.biases.shape != (self.weights.shape[0],):
            raise ConfigError("Need one bias per class")
        for name in ("encoder", "weights", "biases"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"Synthetic model {name} must be finite")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def gain(self, flat: np.ndarray) -> np.ndarray:
        """Per-input scalar gain; flat is (N, d_in)"""
        if not self.nonlinear:
            return np.ones(flat.shape[0])
        return self.gain_offset + self.gain_scale * np.abs(flat[:, 0])

    def latent(self, imgs: np.ndarray) -> np.ndarray:
        """h(x) for a stack of images -> (N, d_lat)"""
        flat = np.asarray(imgs, dtype=float).reshape(-1, self.encoder.shape[0])
        return self.gain(flat)[:, None] * ordered_dot(flat - self.input_offset, self.encoder)

    def logits(self, imgs: np.ndarray) -> np.ndarray:
        return ordered_dot(self.latent(imgs), self.weights.T) + self.biases

    def to_dict(self) -> Dict:
        return {
            "shape": list(self.shape),
            "encoder": self.encoder.tolist(),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "nonlinear": self.nonlinear,
            "gain_offset": self.gain_offset,
            "gain_scale": self.gain_scale,
            "input_offset": self.input_offset,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SyntheticModel":
        try:
            return cls(
                encoder=np.asarray(data["encoder"], dtype=float),
                weights=np.asarray(data["weights"], dtype=float),
                biases=np.asarray(data["biases"], dtype=float),
                shape=tuple(int(d) for d in data["shape"]),
                nonlinear=bool(data.get("nonlinear", False)),
                gain_offset=float(data.get("gain_offset", 0.5)),
                gain_scale=float(data.get("gain_scale", 1.0)),
                input_offset=float(data.get("input_offset", 0.5)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed synthetic model: {e}")

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SyntheticModel":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Synthetic model not found: {path}", code=ErrorCode.MISSING_INPUT)
        return cls.from_dict(json.loads(path.read_text()))


class SyntheticOracle(Oracle):
    """Answers from a SyntheticModel; argmax ties go to the lowest class index"""

    white_box = True

    def __init__(self, model: SyntheticModel):
        super().__init__(model.shape)
        self.model = model

    def top1(self, img: np.ndarray) -> int:
        return self.top1_batch([img])[0]

    def top1_batch(self, imgs: Sequence[np.ndarray]) -> List[int]:
        if len(imgs) == 0:
            return []
        for img in imgs:
            self.check_shape(img)
        stack = quantize(np.stack(imgs))
        return [int(label) for label in np.argmax(self.model.logits(stack), axis=1)]


def make_synthetic_model(
    shape: Tuple[int, int, int] = (8, 8, 1),
    d_lat: int = 8,
    num_classes: int = 10,
    seed: int = 0,
    nonlinear: bool = False,
    logit_scale: float = 20.0,
    gain_offset: float = 0.5,
    gain_scale: float = 1.0,
) -> SyntheticModel:
    """Random encoder and classifier head; logit_scale controls accuracy"""
    rng = np.random.default_rng(seed)
    d_in = int(np.prod(shape))
    encoder = rng.standard_normal((d_in, d_lat)) / np.sqrt(d_in)
    weights = rng.standard_normal((num_classes, d_lat)) * logit_scale / np.sqrt(d_lat)
    biases = np.zeros(num_classes)
    return SyntheticModel(encoder=encoder, weights=weights, biases=biases, shape=tuple(shape),
                          nonlinear=nonlinear, gain_offset=gain_offset, gain_scale=gain_scale)


def fit_logit_scale(target_confidence: float, calibration_count: int = 400, steps: int = 60,
                    **model_kwargs) -> float:
    """logit_scale at which the mean top-1 softmax probability on sampled images hits the target

    The mean top-1 probability rises monotonically with the scale, from 1/K
    toward 1, so a bisection on the log scale finds it. The calibration images use
    seed + 2 and never coincide with a dataset drawn at seed + 1.
    """
    model = make_synthetic_model(logit_scale=1.0, **model_kwargs)
    num_classes = model.num_classes
    if not 1.0 / num_classes < target_confidence < 1.0:
        raise ConfigError(f"Target confidence must lie in (1/K, 1) = ({1.0 / num_classes:.3f}, 1), "
                          f"got {target_confidence}")

    seed = model_kwargs.get("seed", 0) + 2
    images = quantize(sample_synthetic_images(model.shape, calibration_count, seed=seed))
    base = model.logits(images)

    def mean_confidence(scale: float) -> float:
        return float(special.softmax(scale * base, axis=1).max(axis=1).mean())

    low, high = 1e-3, 1.0
    while mean_confidence(high) < target_confidence:
        low, high = high, high * 2
        if high > 1e6:
            raise ConfigError(f"No logit scale reaches mean confidence {target_confidence}")
    for _ in range(steps):
        mid = float(np.sqrt(low * high))
        if mean_confidence(mid) < target_confidence:
            low = mid
        else:
            high = mid
    return high


def sample_synthetic_images(shape: Tuple[int, int, int], count: int, seed: int,
                            smoothness: float = 1.0, spread: float = 0.15) -> np.ndarray:
    """Smooth random images centred on 0.5, clipped to [0, 1]"""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((count,) + tuple(shape))
    if smoothness > 0:
        raw = ndimage.gaussian_filter(raw, sigma=(0, smoothness, smoothness, 0), mode="wrap")
    flat = raw.reshape(count, -1)
    flat = (flat - flat.mean(axis=1, keepdims=True)) / (flat.std(axis=1, keepdims=True) + 1e-12)
    return np.clip(0.5 + spread * flat, 0.0, 1.0).reshape((count,) + tuple(shape))


def sample_synthetic_dataset(model: SyntheticModel, count: int, seed: int, **image_kwargs) -> Dataset:
    """Images plus truth labels drawn from the model's own softmax"""
    images = quantize(sample_synthetic_images(model.shape, count, seed, **image_kwargs))
    probs = special.softmax(model.logits(images), axis=1)
    rng = np.random.default_rng([seed, 1])
    u = rng.random(count)[:, None]
    labels = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), model.num_classes - 1)
    return Dataset(
        images=[img for img in images],
        labels=[int(label) for label in labels],
        num_classes=model.num_classes,
        filenames=[f"img_{i:05d}.bbct" for i in range(count)],
    )


def require_white_box(oracle: Oracle) -> SyntheticModel:
    """The synthetic model behind an oracle, or CapabilityError"""
    inner = oracle
    while isinstance(inner, QueryCache):
        inner = inner.inner
    if isinstance(inner, SyntheticModel):
        return inner
    if not getattr(inner, "white_box", False):
        raise CapabilityError(f"{type(inner).__name__} is a black-box oracle")
    return inner.model


def latent_margin(model: SyntheticModel, img: np.ndarray, class_a: int, class_b: int) -> float:
    """(w_a - w_b)^T h(x) + (b_a - b_b)"""
    return float(latent_margins(model, np.asarray(img)[None], class_a, class_b)[0])


def latent_margins(model: SyntheticModel, imgs: np.ndarray, class_a: int, class_b: int) -> np.ndarray:
    """latent_margin over a stack of images"""
    if not isinstance(model, SyntheticModel):
        raise CapabilityError("latent_margin needs a white-box synthetic model")
    if class_a == class_b:
        raise ConfigError("latent_margin needs two different classes")
    direction = model.weights[class_a] - model.weights[class_b]
    margins = ordered_dot(model.latent(imgs), direction[:, None])[:, 0]
    return margins + (model.biases[class_a] - model.biases[class_b])


def true_confidence(model: SyntheticModel, img: np.ndarray) -> float:
    """Softmax probability of the top-1 class"""
    if not isinstance(model, SyntheticModel):
        raise CapabilityError("true_confidence needs a white-box synthetic model")
    probs = special.softmax(model.logits(np.asarray(img)[None])[0])
    return float(probs.max())


def runner_up(model: SyntheticModel, img: np.ndarray) -> Tuple[int, int]:
    """(top-1, second) classes on the clean input, ties to the lower index"""
    logits = model.logits(np.asarray(img)[None])[0]
    order = np.argsort(-logits, kind="stable")
    return int(order[0]), int(order[1])


def analytic_scale(model: SyntheticModel, img: np.ndarray, sigma: float) -> float:
    """sigma * ||J (w_A - w_B)|| (times the gain), the a that makes the Gaussian model exact"""
    class_a, class_b = runner_up(model, img)
    direction = model.encoder @ (model.weights[class_a] - model.weights[class_b])
    gain = model.gain(np.asarray(img, dtype=float).reshape(1, -1))[0]
    return float(sigma * gain * np.linalg.norm(direction))


# ============== HTTP client ==============

class HttpOracle(Oracle):
    """POST {endpoint}/predict with the float32 payload, bounded retries and in-flight requests"""

    def __init__(
        self,
        endpoint: str,
        shape: Optional[Tuple[int, int, int]] = None,
        timeout: float = 10,
        max_retries: int = 3,
        retry_backoff: float = 0.5,
        max_in_flight: int = 8,
        num_classes: Optional[int] = None,
    ):
        super().__init__(shape)
        self.num_classes = num_classes
        self.url = f"{endpoint.rstrip('/')}/predict"
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_backoff = retry_backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)

    @staticmethod
    def encode_request(img: np.ndarray) -> Dict:
        arr = np.asarray(img)
        return {
            "shape": [int(d) for d in arr.shape],
            "pixels_b64": base64.b64encode(payload_bytes(arr)).decode("ascii"),
        }

    def top1(self, img: np.ndarray) -> int:
        self.check_shape(img)
        body = self.encode_request(img)
        last_error = None

        for attempt in range(self.max_retries):
            try:
                with self._slots:
                    response = requests.post(self.url, json=body, timeout=self.timeout)
            except requests.exceptions.RequestException as e:
                last_error = str(e)
            else:
                if response.status_code == 200:
                    return self._parse(response)
                if response.status_code < 500:
                    raise QueryError(f"Prediction server returned {response.status_code}",
                                     code=ErrorCode.QUERY_STATUS, recoverable=False)
                last_error = f"HTTP {response.status_code}"

            if attempt < self.max_retries - 1:
                activity.query_retry(attempt + 1, self.max_retries, last_error)
                time.sleep(self.retry_backoff)

        activity.log_error(f"ORACLE: All {self.max_retries} attempts failed: {last_error}")
        raise QueryError(f"Query failed after {self.max_retries} attempts: {last_error}")

    def _parse(self, response) -> int:
        try:
            label = response.json()["label"]
        except (ValueError, KeyError, TypeError) as e:
            raise OracleError(f"Malformed prediction response: {e}", code=ErrorCode.BAD_RESPONSE)
        if isinstance(label, bool) or not isinstance(label, int) or label < 0:
            raise OracleError(f"Prediction label must be a non-negative integer, got {label!r}",
                              code=ErrorCode.BAD_RESPONSE)
        if self.num_classes is not None and label >= self.num_classes:
            raise OracleError(f"Prediction label {label} is outside the {self.num_classes} known classes",
                              code=ErrorCode.BAD_RESPONSE)
        return label


# ============== Playback and cache ==============

def read_prediction_log(path: Union[str, Path]) -> Dict[str, int]:
    """JSON-lines {hash, label} -> dict; the first answer per hash wins"""
    entries: Dict[str, int] = {}
    path = Path(path)
    if not path.exists():
        return entries
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                entries.setdefault(str(record["hash"]), int(record["label"]))
            except (ValueError, KeyError, TypeError):
                # A torn final line from an interrupted run is skipped
                activity.log_warning(f"CACHE: Skipping malformed line {line_no} in {path}")
    return entries


class PlaybackOracle(Oracle):
    """Answers from a recorded prediction log keyed by content hash"""

    def __init__(self, path: Union[str, Path], shape: Optional[Tuple[int, int, int]] = None):
        super().__init__(shape)
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Playback log not found: {path}", code=ErrorCode.MISSING_INPUT)
        self.path = path
        self.entries = read_prediction_log(path)

    def top1(self, img: np.ndarray) -> int:
        self.check_shape(img)
        key = content_hash(img)
        if key not in self.entries:
            raise MissingPredictionError(f"No recorded prediction for {key[:12]}...")
        return self.entries[key]


class QueryCache(Oracle):
    """Append-only cache in front of another oracle

    The file format is the playback format, so a cache is a playback log.
    Counters: lookups (every query), hits, remote_calls (forwarded queries).
    """

    def __init__(self, inner: Oracle, path: Optional[Union[str, Path]] = None):
        super().__init__(inner.shape)
        self.inner = inner
        self.white_box = inner.white_box
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self.entries: Dict[str, int] = {}
        self.lookups = 0
        self.hits = 0
        self.remote_calls = 0
        if self.path is not None:
            self.entries = read_prediction_log(self.path)
            if self.entries:
                activity.cache_loaded(str(self.path), len(self.entries))

    @property
    def model(self):
        return getattr(self.inner, "model", None)

    def _lookup(self, keys: List[str]) -> Dict[int, int]:
        found = {}
        with self._lock:
            self.lookups += len(keys)
            for i, key in enumerate(keys):
                if key in self.entries:
                    found[i] = self.entries[key]
            self.hits += len(found)
        return found

    def _store(self, pairs: List[Tuple[str, int]]):
        with self._lock:
            fresh = []
            for key, label in pairs:
                if key not in self.entries:
                    self.entries[key] = label
                    fresh.append((key, label))
            if fresh and self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a") as f:
                    for key, label in fresh:
                        f.write(json.dumps({"hash": key, "label": label}) + "\n")
                    f.flush()

    def top1(self, img: np.ndarray) -> int:
        return self.top1_batch([img])[0]

    def top1_batch(self, imgs: Sequence[np.ndarray]) -> List[int]:
        for img in imgs:
            self.check_shape(img)
        keys = [content_hash(img) for img in imgs]
        labels = self._lookup(keys)

        # Forward each distinct missing key once
        missing: Dict[str, int] = {}
        for i, key in enumerate(keys):
            if i not in labels and key not in missing:
                missing[key] = i
        if missing:
            answers = self.inner.top1_batch([imgs[i] for i in missing.values()])
            with self._lock:
                self.remote_calls += len(answers)
            self._store(list(zip(missing.keys(), answers)))
            resolved = dict(zip(missing.keys(), answers))
            for i, key in enumerate(keys):
                if i not in labels:
                    labels[i] = resolved[key]

        return [labels[i] for i in range(len(keys))]

    def stats(self) -> Dict:
        return {"lookups": self.lookups, "hits": self.hits, "remote_calls": self.remote_calls}


def build_oracle(cfg, shape: Optional[Tuple[int, int, int]] = None,
                 num_classes: Optional[int] = None) -> QueryCache:
    """Oracle named by the run config, wrapped in its query cache"""
    if cfg.oracle == "synthetic":
        base = SyntheticOracle(SyntheticModel.load(cfg.model_path))
    elif cfg.oracle == "http":
        base = HttpOracle(cfg.endpoint, shape=shape, timeout=cfg.timeout, max_retries=cfg.max_retries,
                          retry_backoff=cfg.retry_backoff, max_in_flight=cfg.max_in_flight,
                          num_classes=num_classes)
    elif cfg.oracle == "playback":
        base = PlaybackOracle(cfg.playback_path, shape=shape)
    else:
        raise ConfigError(f"Unknown oracle '{cfg.oracle}'")
    return QueryCache(base, cfg.cache_path)
