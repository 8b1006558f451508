"""AdamW with decoupled weight decay and the warmup + cosine schedule."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import NumericalAbort
from .tensor import Tensor

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
COSINE_FLOOR = 0.01  # final lr = 1% of lr_init


class AdamW:
    """Decoupled-weight-decay Adam over a path-keyed parameter dict.

    ``step`` consumes and clears ``.grad`` of every parameter; a missing
    gradient counts as zero so moments keep decaying deterministically.
    ``lr_scale`` maps a parameter path to a per-group learning-rate factor
    (normalization-layer coefficients train best well below the base rate).
    """

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 1e-5,
                 lr_scale: Callable[[str], float] | None = None):
        self.params = params
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._scales = {k: (lr_scale(k) if lr_scale else 1.0) for k in params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = BETAS
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for key, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericalAbort(f"non-finite gradient for parameter {key!r}")
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            mhat = self.m[key] / bc1
            vhat = self.v[key] / bc2
            eff = lr * self._scales[key]
            if self.weight_decay:
                p.data = p.data * (1.0 - eff * self.weight_decay)
            p.data = p.data - eff * mhat / (np.sqrt(vhat) + ADAM_EPS)
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k])
            self.v[k] = np.array(state["v"][k])


def lr_at(epoch: int, lr_init: float, warmup_epochs: int, total_epochs: int) -> float:
    """Learning rate for a 1-based epoch: linear warmup, then cosine decay
    to COSINE_FLOOR * lr_init; continuous at the warmup boundary."""
    if epoch < 1 or epoch > total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {total_epochs}]")
    if warmup_epochs > 0 and epoch <= warmup_epochs:
        return lr_init * epoch / warmup_epochs
    floor = COSINE_FLOOR * lr_init
    span = max(1, total_epochs - warmup_epochs)
    progress = (epoch - warmup_epochs - 1) / span
    return floor + (lr_init - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
