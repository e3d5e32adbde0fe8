"""
ConfProbe Input Transformations

The randomized transformation family: Gaussian noise, rotation, affine and
elastic deformation. Every random draw comes from its own counter-based
stream keyed by (run_seed, sample_index, draw_index), so results do not
depend on query order or concurrency.
"""

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Dict, Tuple, Iterable

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ErrorCode

FAMILIES = ("gaussian", "rotation", "affine", "elastic")

# Parameters each family reads; everything else stays at 0
FAMILY_PARAMS = {
    "gaussian": ("sigma",),
    "rotation": ("max_degrees",),
    "affine": ("max_degrees", "max_translate", "max_scale_delta"),
    "elastic": ("alpha", "sigma_e"),
}

# Hyperparameter grids searched when a family (not a spec) is configured
GAUSSIAN_SIGMAS = [0.01, 0.05, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2]
ELASTIC_ALPHAS = [10, 20, 50, 70]
ELASTIC_SIGMAS = [2, 5, 10]
ROTATION_DEGREES = [10, 20, 30, 40, 50, 60]
AFFINE_DEGREES = [0, 10, 30]
AFFINE_TRANSLATIONS = [0, 0.1, 0.3]
AFFINE_SCALES = [0, 0.1, 0.3, 1]

KERNEL_TRUNCATE = 4.0       # elastic smoothing kernel cut at 4 sigma_e
MIN_SCALE = 1e-2            # affine scale draws are floored here
SNAP_TOLERANCE = 1e-9       # sampling coordinates this close to a pixel are exact


@dataclass(frozen=True)
class TransformSpec:
    """One parameterized member of a transform family"""
    kind: str
    sigma: float = 0.0
    max_degrees: float = 0.0
    max_translate: float = 0.0
    max_scale_delta: float = 0.0
    alpha: float = 0.0
    sigma_e: float = 0.0

    @classmethod
    def gaussian(cls, sigma: float) -> "TransformSpec":
        return cls(kind="gaussian", sigma=sigma)

    @classmethod
    def rotation(cls, max_degrees: float) -> "TransformSpec":
        return cls(kind="rotation", max_degrees=max_degrees)

    @classmethod
    def affine(cls, max_degrees: float, max_translate: float, max_scale_delta: float) -> "TransformSpec":
        return cls(kind="affine", max_degrees=max_degrees, max_translate=max_translate,
                   max_scale_delta=max_scale_delta)

    @classmethod
    def elastic(cls, alpha: float, sigma_e: float) -> "TransformSpec":
        return cls(kind="elastic", alpha=alpha, sigma_e=sigma_e)

    def validate(self) -> "TransformSpec":
        if self.kind not in FAMILIES:
            raise ConfigError(f"Unknown transform kind '{self.kind}'", code=ErrorCode.INVALID_TRANSFORM)
        for name in FAMILY_PARAMS[self.kind]:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{self.kind}.{name} must be >= 0, got {value}",
                                  code=ErrorCode.INVALID_TRANSFORM)
        if self.kind == "elastic" and self.alpha > 0 and self.sigma_e <= 0:
            raise ConfigError("elastic.sigma_e must be > 0 when alpha > 0",
                              code=ErrorCode.INVALID_TRANSFORM)
        return self

    @property
    def is_identity(self) -> bool:
        return all(getattr(self, name) == 0 for name in FAMILY_PARAMS[self.kind]
                   if name != "sigma_e")

    def to_dict(self) -> Dict:
        data = {"kind": self.kind}
        for name in FAMILY_PARAMS.get(self.kind, ()):
            data[name] = getattr(self, name)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TransformSpec":
        if not isinstance(data, dict) or "kind" not in data:
            raise ConfigError("Transform spec needs a 'kind'", code=ErrorCode.INVALID_TRANSFORM)
        kind = data["kind"]
        if kind not in FAMILIES:
            raise ConfigError(f"Unknown transform kind '{kind}'", code=ErrorCode.INVALID_TRANSFORM)
        extra = set(data) - {"kind"} - set(FAMILY_PARAMS[kind])
        if extra:
            raise ConfigError(f"Unexpected {kind} parameters: {', '.join(sorted(extra))}",
                              code=ErrorCode.INVALID_TRANSFORM)
        try:
            params = {name: float(data.get(name, 0.0)) for name in FAMILY_PARAMS[kind]}
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Bad {kind} parameter: {e}", code=ErrorCode.INVALID_TRANSFORM)
        return cls(kind=kind, **params).validate()

    def label(self) -> str:
        params = ",".join(f"{name}={getattr(self, name):g}" for name in FAMILY_PARAMS[self.kind])
        return f"{self.kind}({params})"


@dataclass(frozen=True)
class SampleSeed:
    """Identifies one random draw: run, sample and draw index"""
    run_seed: int
    sample_index: int
    draw_index: int

    def generator(self) -> np.random.Generator:
        key = stream_key(self.run_seed, self.sample_index)
        # Draw index occupies the second counter word: streams never overlap
        return np.random.Generator(np.random.Philox(key=key, counter=self.draw_index << 64))


@lru_cache(maxsize=4096)
def stream_key(run_seed: int, sample_index: int) -> int:
    """128-bit Philox key hashed from (run_seed, sample_index)"""
    digest = hashlib.sha256(f"{int(run_seed)}:{int(sample_index)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], byteorder="little")


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check an H x W x C image with finite values in [0, 1]"""
    arr = np.asarray(img, dtype=float)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ConfigError(f"Image must be H x W x C, got shape {arr.shape}", code=ErrorCode.SHAPE_MISMATCH)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ConfigError("Image values must be finite and in [0, 1]")
    return arr


def apply_transform(img: np.ndarray, spec: TransformSpec, seed: SampleSeed) -> np.ndarray:
    """Apply one random draw of `spec` to `img`; deterministic given `seed`"""
    spec.validate()
    img = validate_image(img)
    if spec.is_identity:
        return img.copy()

    rng = seed.generator()
    height, width = img.shape[0], img.shape[1]

    if spec.kind == "gaussian":
        noisy = img + spec.sigma * rng.standard_normal(img.shape)
        return np.clip(noisy, 0.0, 1.0)

    if spec.kind == "rotation":
        degrees = rng.uniform(-spec.max_degrees, spec.max_degrees)
        return rotate_image(img, degrees)

    if spec.kind == "affine":
        degrees = rng.uniform(-spec.max_degrees, spec.max_degrees)
        tx = rng.uniform(-spec.max_translate, spec.max_translate) * width
        ty = rng.uniform(-spec.max_translate, spec.max_translate) * height
        scale = rng.uniform(1.0 - spec.max_scale_delta, 1.0 + spec.max_scale_delta)
        return affine_warp(img, degrees, (tx, ty), scale)

    # elastic
    dx = _smoothed_field(rng.uniform(-1.0, 1.0, (height, width)), spec.sigma_e) * spec.alpha
    dy = _smoothed_field(rng.uniform(-1.0, 1.0, (height, width)), spec.sigma_e) * spec.alpha
    rows, cols = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
    return _resample(img, rows + dy, cols + dx)


def sample_transforms(img: np.ndarray, spec: TransformSpec, run_seed: int, sample_index: int,
                      draw_indices: Iterable[int]) -> List[np.ndarray]:
    """Draws for one sample, in draw_indices order"""
    return [apply_transform(img, spec, SampleSeed(run_seed, sample_index, d)) for d in draw_indices]


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center by a fixed angle (bilinear, zero padding)"""
    return affine_warp(img, degrees, (0.0, 0.0), 1.0)


def affine_warp(img: np.ndarray, degrees: float, translate: Tuple[float, float], scale: float) -> np.ndarray:
    """Rotate by `degrees`, scale by `scale` about the center, then shift by `translate` (x, y) pixels"""
    img = np.asarray(img, dtype=float)
    height, width = img.shape[0], img.shape[1]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    scale = max(scale, MIN_SCALE)

    rows, cols = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
    dx = cols - cx - translate[0]
    dy = rows - cy - translate[1]
    # Inverse map: output pixel -> source location
    src_cols = (cos_t * dx + sin_t * dy) / scale + cx
    src_rows = (-sin_t * dx + cos_t * dy) / scale + cy
    return _resample(img, src_rows, src_cols)


def _smoothed_field(noise: np.ndarray, sigma_e: float) -> np.ndarray:
    return ndimage.gaussian_filter(noise, sigma=sigma_e, mode="constant", cval=0.0,
                                   truncate=KERNEL_TRUNCATE)


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.round(coords)
    return np.where(np.abs(coords - nearest) < SNAP_TOLERANCE, nearest, coords)


def _resample(img: np.ndarray, src_rows: np.ndarray, src_cols: np.ndarray) -> np.ndarray:
    """Bilinear sampling of every channel at (src_rows, src_cols), zero outside"""
    coords = np.stack([_snap(src_rows), _snap(src_cols)])
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.map_coordinates(img[..., ch], coords, order=1,
                                               mode="grid-constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def transform_grid(kind: str) -> List[TransformSpec]:
    """The hyperparameter grid explored for a transform family"""
    if kind == "gaussian":
        return [TransformSpec.gaussian(s) for s in GAUSSIAN_SIGMAS]
    if kind == "elastic":
        return [TransformSpec.elastic(a, s) for a in ELASTIC_ALPHAS for s in ELASTIC_SIGMAS]
    if kind == "rotation":
        return [TransformSpec.rotation(d) for d in ROTATION_DEGREES]
    if kind == "affine":
        return [TransformSpec.affine(d, t, s)
                for d in AFFINE_DEGREES for t in AFFINE_TRANSLATIONS for s in AFFINE_SCALES]
    raise ConfigError(f"Unknown transform family '{kind}'", code=ErrorCode.INVALID_TRANSFORM)


def specs_from_config(transform) -> List[TransformSpec]:
    """A family name expands to its grid; a mapping is a single explicit spec"""
    if isinstance(transform, str):
        return transform_grid(transform)
    return [TransformSpec.from_dict(transform)]


# One representative spec per family, used where a single spec is needed
DEFAULT_SPECS = {
    "gaussian": TransformSpec.gaussian(0.1),
    "rotation": TransformSpec.rotation(30),
    "affine": TransformSpec.affine(10, 0.1, 0.1),
    "elastic": TransformSpec.elastic(20, 2),
}


def resolve_spec(transform) -> TransformSpec:
    """A single spec: the mapping itself, or the family's default"""
    if isinstance(transform, str):
        if transform not in DEFAULT_SPECS:
            raise ConfigError(f"Unknown transform family '{transform}'", code=ErrorCode.INVALID_TRANSFORM)
        return DEFAULT_SPECS[transform]
    return TransformSpec.from_dict(transform)
