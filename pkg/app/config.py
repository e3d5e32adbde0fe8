"""
ConfProbe Configuration Management
Handles loading, merging and validating the flat run configuration
"""

import copy
import yaml
import requests
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, List, Union, Dict, Any

from .errors import ConfigError, ErrorCode
from .transforms import FAMILIES, specs_from_config

CONFIG_DIR = Path(__file__).parent.parent / "config"
DEFAULT_CONFIG = CONFIG_DIR / "default.yaml"

ORACLE_KINDS = ("synthetic", "http", "playback")
MODEL_KINDS = ("gaussian", "transfer")


def load_config(path: Optional[Union[str, Path]] = None) -> dict:
    """Load defaults, then overlay the given config file (YAML or JSON)"""
    config = {}
    if DEFAULT_CONFIG.exists():
        with open(DEFAULT_CONFIG) as f:
            config = yaml.safe_load(f) or {}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", code=ErrorCode.MISSING_INPUT)
        with open(path) as f:
            overrides = yaml.safe_load(f) or {}
        if not isinstance(overrides, dict):
            raise ConfigError(f"Config file must be a flat mapping: {path}")
        config.update(overrides)

    return config


def save_config(config: dict, path: Union[str, Path]):
    """Save configuration to file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        yaml.dump(config, f, default_flow_style=False, sort_keys=False)


def merge_overrides(config: dict, overrides: Dict[str, Any]) -> dict:
    """CLI flags override config keys; None means 'flag not given'"""
    merged = copy.deepcopy(config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


@dataclass
class RunConfig:
    """Validated settings for one command invocation"""
    oracle: str = "synthetic"
    model_path: Optional[str] = None
    endpoint: Optional[str] = None
    timeout: float = 10.0
    max_retries: int = 3
    retry_backoff: float = 0.5
    max_in_flight: int = 8
    playback_path: Optional[str] = None
    cache_path: Optional[str] = None
    dataset: Optional[str] = None
    num_classes: Optional[int] = None
    m: int = 1000
    n: int = 9000
    transform: Union[str, dict] = "gaussian"
    s: int = 10
    s_list: List[int] = field(default_factory=lambda: [10, 50])
    sweep_families: List[str] = field(default_factory=lambda: ["gaussian", "rotation", "affine", "elastic"])
    run_seed: int = 0
    workers: int = 1
    model_kind: str = "gaussian"
    a_grid: List[float] = field(default_factory=list)
    budget: Optional[int] = None
    fit_path: Optional[str] = None
    cdf_path: Optional[str] = None
    diagnostics_path: Optional[str] = None
    output_dir: str = "runs/latest"
    diag_images: int = 100
    diag_draws: int = 1000
    diag_a_grid_size: int = 50
    synth_height: int = 8
    synth_width: int = 8
    synth_channels: int = 1
    synth_latent: int = 8
    synth_classes: int = 10
    synth_samples: int = 3000
    synth_nonlinear: bool = True
    synth_logit_scale: float = 20.0
    synth_target_confidence: Optional[float] = 0.75
    gain_offset: float = 0.5
    gain_scale: float = 1.0
    host: str = "127.0.0.1"
    port: int = 8085

    def to_dict(self) -> dict:
        return asdict(self)


def build_run_config(config: dict) -> RunConfig:
    """Build a RunConfig from a flat config dict, ignoring unknown keys"""
    known = RunConfig.__dataclass_fields__.keys()
    unknown = sorted(k for k in config if k not in known)
    if unknown:
        from . import activity
        activity.log_warning(f"CONFIG: Ignoring unknown keys: {', '.join(unknown)}")

    values = {k: v for k, v in config.items() if k in known}
    try:
        run_config = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}")

    validate_run_config(run_config)
    return run_config


def validate_run_config(cfg: RunConfig):
    """Raise ConfigError on the first invalid setting"""
    if cfg.oracle not in ORACLE_KINDS:
        raise ConfigError(f"oracle must be one of {ORACLE_KINDS}, got '{cfg.oracle}'")
    if cfg.model_kind not in MODEL_KINDS:
        raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got '{cfg.model_kind}'")

    for name in ("m", "n", "s"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or value < 0:
            raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
    for name in ("max_retries", "max_in_flight", "workers", "diag_draws", "diag_a_grid_size"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if cfg.diag_images < 2:
        raise ConfigError("diag_images must be at least 2")
    if any((not isinstance(s, int)) or s < 0 for s in cfg.s_list):
        raise ConfigError(f"s_list entries must be non-negative integers, got {cfg.s_list!r}")
    if not cfg.sweep_families or any(f not in FAMILIES for f in cfg.sweep_families):
        raise ConfigError(f"sweep_families must be a non-empty subset of {FAMILIES}")
    specs_from_config(cfg.transform)
    if cfg.timeout <= 0:
        raise ConfigError("timeout must be positive")
    if cfg.budget is not None and (not isinstance(cfg.budget, int) or cfg.budget < 0):
        raise ConfigError(f"budget must be null or a non-negative integer, got {cfg.budget!r}")
    if any(a <= 0 for a in cfg.a_grid):
        raise ConfigError("a_grid values must be positive")
    if cfg.num_classes is not None and cfg.num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if cfg.synth_target_confidence is not None and not 0 < cfg.synth_target_confidence < 1:
        raise ConfigError("synth_target_confidence must be null or lie in (0, 1)")

    if cfg.oracle == "http" and not cfg.endpoint:
        raise ConfigError("http oracle needs an endpoint", code=ErrorCode.MISSING_INPUT)
    if cfg.oracle == "playback" and not cfg.playback_path:
        raise ConfigError("playback oracle needs playback_path", code=ErrorCode.MISSING_INPUT)
    if cfg.oracle == "synthetic" and not cfg.model_path:
        raise ConfigError("synthetic oracle needs model_path", code=ErrorCode.MISSING_INPUT)
    if cfg.model_kind == "transfer" and not cfg.cdf_path:
        raise ConfigError("transfer model needs cdf_path", code=ErrorCode.MISSING_INPUT)


def test_connection(endpoint: str, timeout: float = 5) -> dict:
    """Ping a prediction server's status route"""
    result = {"connected": False, "error": None, "version": None, "shape": None}

    try:
        r = requests.get(f"{endpoint.rstrip('/')}/api/status", timeout=timeout)
        if r.status_code == 200:
            data = r.json()
            result["connected"] = True
            result["version"] = data.get("version")
            result["shape"] = data.get("shape")
        else:
            result["error"] = f"HTTP {r.status_code}"
    except requests.exceptions.RequestException as e:
        result["error"] = str(e)

    return result
