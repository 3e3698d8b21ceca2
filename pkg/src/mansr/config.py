"""Run configuration shared by the pipeline and the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .evaluation import VARIANTS, PrequentialConfig
from .gating import GateConfig
from .index import IndexConfig
from .memory import MemoryConfig
from .recommender import ModelConfig, PretrainConfig


class ConfigError(ValueError):
    pass


# dataset-tuned defaults: (eta, K, shallow weight)
DATASET_DEFAULTS = {
    "yoochoose": {"eta": 5e-4, "K": 50, "shallow_weight": 0.7},
    "diginetica": {"eta": 1e-4, "K": 100, "shallow_weight": 0.8},
}


@dataclass
class RunConfig:
    seed: int = 0
    # preprocessing
    preset: str = "yoochoose"
    min_item_support: int = 5
    min_session_length: int = 2
    max_session_length: int = 20
    test_days: float = 7.0
    valid_fraction: float = 0.1
    recent_fraction: float = 1.0
    # recommender
    embed_dim: int = 50
    hidden: int = 100
    init_scale: float = 0.1
    dtype: str = "float64"
    epochs: int = 30
    batch_size: int = 512
    lr: float = 1e-3
    optimizer: str = "adam"
    # memory and index
    K: int = 50
    index_kind: str = "ivfpq"
    nlist: int | None = None
    nprobe: int = 8
    m: int = 8
    bits: int = 8
    kmeans_iters: int = 25
    capacity: int | None = None
    # gate
    gate_hidden: int = 100
    gate_lr: float = 1e-3
    gate_patience: int = 3
    gate_max_epochs: int = 100
    insert_valid: bool = True
    # testing
    variant: str = "man"
    eta: float = 5e-4
    shallow_weight: float = 0.7
    cadence: int = 100
    interleave: bool = True
    strict: bool = False

    def validate(self) -> "RunConfig":
        def need(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        need(self.seed >= 0, "seed must be non-negative")
        need(self.min_item_support >= 1, "min_item_support must be at least 1")
        need(2 <= self.min_session_length <= self.max_session_length, "need 2 <= min_session_length <= max_session_length")
        need(self.test_days > 0, "test_days must be positive")
        need(0.0 <= self.valid_fraction < 1.0, "valid_fraction must lie in [0, 1)")
        need(0.0 < self.recent_fraction <= 1.0, "recent_fraction must lie in (0, 1]")
        need(self.embed_dim >= 1 and self.hidden >= 1, "embed_dim and hidden must be positive")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        need(self.epochs >= 0 and self.batch_size >= 1, "epochs >= 0 and batch_size >= 1 required")
        need(self.lr > 0, "lr must be positive")
        need(self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd")
        need(self.K >= 1, "K must be positive")
        need(self.index_kind in ("ivfpq", "flat"), "index_kind must be ivfpq or flat")
        need(self.nlist is None or 1 <= self.nlist <= 65536, "nlist must lie in [1, 65536]")
        need(self.nprobe >= 1, "nprobe must be positive")
        need(self.m >= 1 and 1 <= self.bits <= 16, "m >= 1 and bits in [1, 16] required")
        need(self.capacity is None or self.capacity >= 1, "capacity must be positive")
        need(self.gate_hidden >= 1 and self.gate_lr >= 0, "gate_hidden >= 1 and gate_lr >= 0 required")
        need(self.variant in VARIANTS, f"variant must be one of {', '.join(VARIANTS)}")
        need(self.variant != "man-bounded" or self.capacity is not None, "man-bounded needs --capacity")
        need(self.eta >= 0, "eta must be non-negative")
        need(0.0 <= self.shallow_weight <= 1.0, "shallow weight must lie in [0, 1]")
        need(self.cadence >= 1, "cadence must be at least 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data).validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_dataset_defaults(self, dataset: str) -> "RunConfig":
        for k, v in DATASET_DEFAULTS.get(dataset, {}).items():
            setattr(self, k, v)
        return self

    # component configs

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.embed_dim, self.hidden, self.init_scale, self.dtype)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(self.epochs, self.batch_size, self.lr, self.optimizer, self.seed)

    def memory_config(self) -> MemoryConfig:
        index = IndexConfig(nlist=self.nlist, nprobe=self.nprobe, m=self.m, bits=self.bits,
                            kmeans_iters=self.kmeans_iters, seed=self.seed)
        return MemoryConfig(capacity=None, index_kind=self.index_kind, index=index)

    def gate_config(self) -> GateConfig:
        return GateConfig(hidden=self.gate_hidden, lr=self.gate_lr, patience=self.gate_patience,
                          max_epochs=self.gate_max_epochs, seed=self.seed)

    def prequential_config(self) -> PrequentialConfig:
        return PrequentialConfig(variant=self.variant, cadence=self.cadence, eta=self.eta, gate_lr=self.gate_lr,
                                 K=self.K, nprobe=self.nprobe, shallow_weight=self.shallow_weight,
                                 capacity=self.capacity, strict=self.strict, seed=self.seed)
