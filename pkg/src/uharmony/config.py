"""Training configuration and the experiment config file format (JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigurationError

DTYPES = {"f32": "float32", "f64": "float64"}


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    weight_decay: float = 1e-5
    warmup_epochs: int = 5
    total_epochs: int = 30
    batch_size: int = 2
    patch_extent: int = 24
    seed: int = 0
    w_dice: float = 0.5
    w_ce: float = 0.5
    w_domain: float = 0.1          # auxiliary domain cross-entropy weight, 0 disables
    gate_end_to_end: bool = True   # let gate gradients reach the backbone
    harmony_lr_scale: float = 0.03  # lr factor for harmonization coefficients
    proto_momentum: float = 0.99
    tau: float = 0.1
    route_mode: str = "product"    # product | gate_only | sim_only
    fg_bias: float = 0.7
    dtype: str = "f64"
    schedule: str = "cosine_after_warmup"
    val_subset: int = 8            # val volumes per domain for per-epoch metrics

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigurationError(
                f"warmup_epochs {self.warmup_epochs} must be < total_epochs {self.total_epochs}"
            )
        if self.lr_init <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate must be positive, decay non-negative")
        if self.batch_size < 1 or self.patch_extent < 1:
            raise ConfigurationError("batch_size and patch_extent must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}")
        if self.schedule != "cosine_after_warmup":
            raise ConfigurationError("only the cosine_after_warmup schedule is implemented")
        if min(self.w_dice, self.w_ce, self.w_domain) < 0:
            raise ConfigurationError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _from_dict(cls, doc: dict, what: str):
    fields = set(cls.__dataclass_fields__)
    unknown = set(doc) - fields
    if unknown:
        raise ConfigurationError(f"unknown {what} config keys: {sorted(unknown)}")
    return cls(**doc)


def load_experiment_config(path) -> tuple[TrainConfig, BackboneConfig]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    train = _from_dict(TrainConfig, doc.get("train", {}), "train")
    backbone = _from_dict(BackboneConfig, doc.get("backbone", {}), "backbone")
    return train, backbone
