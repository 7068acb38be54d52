"""Simulation configuration: defaults, presets, JSON loading and validation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

from .errors import ConfigError

log = logging.getLogger(__name__)

MODES = ("cfcl_explicit", "cfcl_implicit", "uniform", "bulk", "kmeans", "fedavg")
REGIMES = ("explicit", "implicit")
DATASETS = ("synthetic", "fmnist", "usps", "idx")


@dataclass
class SimConfig:
    # what to run
    mode: str = "cfcl_explicit"
    regime: str = "explicit"          # exchange regime for the uniform/bulk/kmeans baselines
    seed: int = 0
    out: str = "runs"

    # data
    dataset: str = "synthetic"
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 100
    dim: int = 2
    spread: float = 0.25
    radius: float = 1.0
    classes_per_device: int = 3
    idx_train_images: str = "train-images-idx3-ubyte"
    idx_train_labels: str = "train-labels-idx1-ubyte"
    idx_test_images: str = "t10k-images-idx3-ubyte"
    idx_test_labels: str = "t10k-labels-idx1-ubyte"
    data_dir: Optional[str] = None
    augmentation: str = "gaussian_noise"
    aug_sigma: Optional[float] = None  # default 0.1 * spread
    aug_max_shift: int = 2

    # topology
    devices: int = 10
    avg_degree: float = 7.0
    topology_seed: Optional[int] = None

    # schedule
    T: int = 1500
    T_a: int = 25
    T_p: int = 25
    n_per_link: int = 5
    participants: Optional[int] = None

    # exchange
    k_reserve: int = 10
    k_approx: int = 50
    k_macro: int = 10
    k_local: int = 10
    k_reserve_clusters: int = 10
    reserve_selection: str = "kmeans"
    importance_model: str = "global"
    temperature: float = 1.0
    margin: float = 1.0
    reg_k: float = 1.0
    overlap_mu: float = 0.0
    overlap_sigma: float = 1.0
    reg_scale: float = 1.0
    reg_rho: float = 0.0
    zeta: str = "zero"

    # encoder / optimiser
    encoder_dims: List[int] = field(default_factory=lambda: [2, 32, 16, 8])
    activation: str = "relu"
    optimizer: str = "sgd"
    lr: float = 0.05
    batch_size: int = 32

    # evaluation
    probe_iters: int = 1000
    probe_lr: float = 0.1
    probe_batch: int = 32
    eval_per_class: int = 30
    thresholds: List[float] = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8])

    # accounting
    d2d_rate: float = 1e6
    uplink_rate: float = 1e6
    model_param_bits: int = 32
    datapoint_bits: int = 8
    embedding_value_bits: int = 32

    @property
    def exchange_regime(self) -> Optional[str]:
        if self.mode == "cfcl_explicit":
            return "explicit"
        if self.mode == "cfcl_implicit":
            return "implicit"
        if self.mode == "fedavg":
            return None
        return self.regime

    @property
    def noise_sigma(self) -> float:
        return self.aug_sigma if self.aug_sigma is not None else 0.1 * self.spread

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "synthetic": {},
    "fmnist": {
        "dataset": "fmnist", "dim": 784, "encoder_dims": [784, 128, 16],
        "T": 2000, "T_a": 25, "T_p": 25, "k_reserve": 20, "k_approx": 100,
        "k_macro": 20, "k_local": 20, "k_reserve_clusters": 20,
        "augmentation": "random_crop_pad", "optimizer": "adam", "lr": 1e-4,
    },
    "usps": {
        "dataset": "usps", "dim": 256, "encoder_dims": [256, 128, 16],
        "T": 1500, "T_a": 10, "T_p": 25, "k_reserve": 10, "k_approx": 100,
        "k_macro": 10, "k_local": 10, "k_reserve_clusters": 10,
        "augmentation": "random_crop_pad", "optimizer": "adam", "lr": 1e-3,
    },
}


def field_names():
    return [f.name for f in fields(SimConfig)]


def _coerce(name, value):
    """Cast a value (possibly a CLI string) to the type of the matching default."""
    default = getattr(SimConfig(), name)
    if value is None:
        return None
    if isinstance(value, str) and name in _LIST_FIELDS:
        value = [v for v in value.split(",") if v.strip()]
    try:
        if name in _LIST_FIELDS:
            cast = int if name == "encoder_dims" else float
            return [cast(v) for v in value]
        if name in _OPTIONAL_INT:
            return int(value)
        if name in _OPTIONAL_FLOAT:
            return float(value)
        if isinstance(default, bool):
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None or isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"cannot interpret {value!r}: {exc}") from None
    return value


_LIST_FIELDS = {"encoder_dims", "thresholds"}
_OPTIONAL_INT = {"topology_seed", "participants"}
_OPTIONAL_FLOAT = {"aug_sigma"}


def build_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None,
                 preset: Optional[str] = None) -> SimConfig:
    """Defaults < preset < file values < overrides, then validated."""
    names = set(field_names())
    merged = {}
    file_values = dict(file_values or {})
    preset = file_values.pop("preset", preset)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}")
        merged.update(PRESETS[preset])
    for source in (file_values, overrides or {}):
        for key, value in source.items():
            if key not in names:
                raise ConfigError(key, "unknown configuration key")
            merged[key] = value
    cfg = SimConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    return validate(cfg)


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                 preset: Optional[str] = None) -> SimConfig:
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            text = f.read()
        try:
            values = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("<file>", "top level must be a JSON object")
    return build_config(values, overrides, preset)


def validate(cfg: SimConfig) -> SimConfig:
    def need(key, ok, msg):
        if not ok:
            raise ConfigError(key, msg)

    need("mode", cfg.mode in MODES, f"must be one of {MODES}")
    need("regime", cfg.regime in REGIMES, f"must be one of {REGIMES}")
    need("dataset", cfg.dataset in DATASETS, f"must be one of {DATASETS}")
    need("T_a", cfg.T_a >= 2, "must be >= 2 (staleness weight divides by T_a - 1)")
    need("T_p", cfg.T_p >= 1, "must be >= 1")
    need("T", cfg.T >= 1, "must be >= 1")
    if cfg.T % cfg.T_a:
        rounded = (cfg.T // cfg.T_a + 1) * cfg.T_a
        log.warning("T=%d is not a multiple of T_a=%d; running to T=%d", cfg.T, cfg.T_a, rounded)
        cfg.T = rounded
    need("devices", cfg.devices >= 1, "must be >= 1")
    need("classes", cfg.classes >= 2, "must be >= 2")
    need("per_class", cfg.per_class >= 1, "must be >= 1")
    need("test_per_class", cfg.test_per_class >= 1, "must be >= 1")
    need("classes_per_device", 1 <= cfg.classes_per_device <= cfg.classes,
         "must lie in [1, classes]")
    need("avg_degree", cfg.devices == 1 or 0 < cfg.avg_degree <= cfg.devices - 1,
         "must lie in (0, devices - 1]")
    need("n_per_link", cfg.n_per_link >= 1, "must be >= 1")
    need("participants", cfg.participants is None or 1 <= cfg.participants <= cfg.devices,
         "must lie in [1, devices]")
    for key in ("k_reserve", "k_approx", "k_macro", "k_local", "k_reserve_clusters",
                "batch_size", "probe_iters", "probe_batch", "eval_per_class"):
        need(key, getattr(cfg, key) >= 1, "must be >= 1")
    need("k_local", cfg.mode != "cfcl_implicit" or cfg.k_local >= 2,
         "implicit exchange needs at least two local clusters")
    need("reserve_selection", cfg.reserve_selection in ("kmeans", "uniform"),
         "must be 'kmeans' or 'uniform'")
    need("importance_model", cfg.importance_model in ("global", "local"),
         "must be 'global' or 'local'")
    need("margin", cfg.margin > 0, "must be positive")
    need("reg_k", cfg.reg_k > 0, "must be positive")
    need("overlap_sigma", cfg.overlap_sigma > 0, "must be positive")
    need("reg_scale", cfg.reg_scale > 0, "must be positive")
    need("zeta", cfg.zeta in ("zero", "time_fraction"), "must be 'zero' or 'time_fraction'")
    need("temperature", cfg.temperature == cfg.temperature, "must be finite")
    need("encoder_dims", len(cfg.encoder_dims) >= 2 and all(d >= 1 for d in cfg.encoder_dims),
         "needs at least two positive layer sizes")
    need("activation", cfg.activation in ("relu", "tanh"), "must be 'relu' or 'tanh'")
    need("optimizer", cfg.optimizer in ("sgd", "adam"), "must be 'sgd' or 'adam'")
    need("lr", cfg.lr >= 0, "must be non-negative")
    need("spread", cfg.spread >= 0, "must be non-negative")
    need("augmentation", cfg.augmentation in ("gaussian_noise", "random_scale", "random_crop_pad",
                                              "horizontal_flip", "blur"),
         "unknown augmentation family")
    for key in ("d2d_rate", "uplink_rate", "model_param_bits", "datapoint_bits",
                "embedding_value_bits"):
        need(key, getattr(cfg, key) > 0, "must be positive")
    if cfg.dataset == "synthetic":
        need("encoder_dims", cfg.encoder_dims[0] == cfg.dim,
             f"first layer must equal the data dim {cfg.dim}")
    return cfg
