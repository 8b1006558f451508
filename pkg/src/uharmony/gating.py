"""Dataset-free inference machinery: union label space over unaligned
per-domain class sets, gating softmax, domain prototypes, cosine-similarity
routing, and per-domain output-channel masking.

Domains may have label sets of different sizes and membership. All domains
share a single background channel at union index 0. At inference the gate's
soft domain prediction and the prototype similarities combine into a routing
weight; hard routing selects the argmax domain (ties broken by lowest id) and
suppresses the channels outside its label set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, StateError
from .tensor import Tensor

log = logging.getLogger(__name__)

BACKGROUND = "background"
NEG_FILL = -1e9  # -inf surrogate for hard-masked logit channels


@dataclass
class DomainInfo:
    domain_id: int
    name: str
    classes: tuple[str, ...]  # foreground label set, background excluded


class DomainRegistry:
    """Ordered set of domains, the union label space, and per-domain channel masks."""

    def __init__(self, domains: list[DomainInfo]):
        if not domains:
            raise ConfigurationError("registry needs at least one domain")
        ids = [d.domain_id for d in domains]
        if ids != list(range(len(domains))):
            raise ConfigurationError(f"domain ids must be 0..n-1 in order, got {ids}")
        names = [d.name for d in domains]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate domain names: {names}")
        self.domains = domains
        union: list[str] = [BACKGROUND]
        for d in domains:
            if len(set(d.classes)) != len(d.classes):
                raise ConfigurationError(f"duplicate class in domain {d.name!r}: {d.classes}")
            for c in d.classes:
                if c == BACKGROUND:
                    raise ConfigurationError("the background class is implicit, do not list it")
                if c not in union:
                    union.append(c)
        self.union_labels: tuple[str, ...] = tuple(union)
        masks = np.zeros((len(domains), len(union)), dtype=bool)
        masks[:, 0] = True  # shared background channel
        for d in domains:
            for c in d.classes:
                masks[d.domain_id, union.index(c)] = True
        self.masks = masks

    @classmethod
    def from_label_sets(cls, label_sets: dict[str, list[str]]) -> "DomainRegistry":
        return cls([
            DomainInfo(i, name, tuple(classes))
            for i, (name, classes) in enumerate(label_sets.items())
        ])

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def n_union(self) -> int:
        return len(self.union_labels)

    def domain_by_name(self, name: str) -> DomainInfo:
        for d in self.domains:
            if d.name == name:
                return d
        raise ConfigurationError(f"unknown domain {name!r}")

    def check_id(self, domain_id: int) -> DomainInfo:
        if not 0 <= domain_id < self.n_domains:
            raise ConfigurationError(f"unknown domain id {domain_id}")
        return self.domains[domain_id]

    def union_index(self, class_name: str) -> int:
        try:
            return self.union_labels.index(class_name)
        except ValueError:
            raise ConfigurationError(f"class {class_name!r} not in union label space") from None

    def loss_channels(self, domain_id: int) -> list[int]:
        """Union channel indices supervised for this domain: background plus own classes."""
        d = self.check_id(domain_id)
        return [0] + [self.union_index(c) for c in d.classes]

    def to_json(self) -> str:
        return json.dumps(
            {
                "domains": [
                    {"id": d.domain_id, "name": d.name, "classes": list(d.classes)}
                    for d in self.domains
                ],
                "union_labels": list(self.union_labels),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DomainRegistry":
        doc = json.loads(text)
        reg = cls([
            DomainInfo(d["id"], d["name"], tuple(d["classes"])) for d in doc["domains"]
        ])
        if "union_labels" in doc and tuple(doc["union_labels"]) != reg.union_labels:
            raise ConfigurationError("registry union_labels inconsistent with domain class sets")
        return reg


@dataclass
class GateParams:
    """Linear gating head: probabilities = softmax(W @ features + B)."""

    W: Tensor  # (n_domains, m)
    B: Tensor  # (n_domains,)

    @classmethod
    def init(cls, n_domains: int, m: int, dtype=np.float64) -> "GateParams":
        return cls(
            W=Tensor(np.zeros((n_domains, m), dtype=dtype), requires_grad=True),
            B=Tensor(np.zeros(n_domains, dtype=dtype), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "B": self.B}


def gate(features: Tensor, params: GateParams) -> Tensor:
    """Soft domain prediction for a batch of pooled feature vectors (B, m)."""
    if features.data.ndim != 2 or features.shape[1] != params.W.shape[1]:
        raise ConfigurationError(
            f"gate features {features.shape} incompatible with W {params.W.shape}"
        )
    return ops.softmax(ops.linear(features, params.W, params.B))


class PrototypeBank:
    """Per-domain feature means with EMA monitoring and an exact finalize pass.

    ``update`` keeps an exponential moving average for cheap mid-training
    monitoring while also accumulating exact float64 sums; ``finalize``
    replaces each prototype with the exact mean of everything recorded since
    the last ``reset_records``. Inference requires a finalized bank.
    """

    def __init__(self, n_domains: int, m: int, momentum: float = 0.99):
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError(f"momentum must be in (0,1), got {momentum}")
        self.n_domains = n_domains
        self.m = m
        self.momentum = momentum
        self.ema = np.zeros((n_domains, m))
        self.ema_counts = np.zeros(n_domains, dtype=np.int64)
        self.sums = np.zeros((n_domains, m))
        self.counts = np.zeros(n_domains, dtype=np.int64)
        self.prototypes: np.ndarray | None = None

    def update(self, domain_id: int, features: np.ndarray) -> None:
        if not 0 <= domain_id < self.n_domains:
            raise ConfigurationError(f"unknown domain id {domain_id}")
        f = np.asarray(features, dtype=np.float64)
        if f.shape != (self.m,):
            raise ConfigurationError(f"feature length {f.shape} != prototype length {self.m}")
        if self.ema_counts[domain_id] == 0:
            self.ema[domain_id] = f
        else:
            self.ema[domain_id] = self.momentum * self.ema[domain_id] + (1 - self.momentum) * f
        self.ema_counts[domain_id] += 1
        self.sums[domain_id] += f
        self.counts[domain_id] += 1

    def reset_records(self) -> None:
        self.sums[:] = 0
        self.counts[:] = 0

    def finalize(self) -> None:
        if (self.counts == 0).any():
            missing = np.flatnonzero(self.counts == 0).tolist()
            raise StateError(f"cannot finalize: no recorded features for domains {missing}")
        self.prototypes = self.sums / self.counts[:, None]
        norms = np.linalg.norm(self.prototypes, axis=1)
        for j in np.flatnonzero(norms == 0):
            log.warning("degenerate (zero) prototype for domain %d", j)

    @property
    def finalized(self) -> bool:
        return self.prototypes is not None

    def current_prototypes(self) -> np.ndarray:
        """Finalized prototypes when available, the EMA estimate otherwise."""
        if self.prototypes is not None:
            return self.prototypes
        return self.ema


def similarity(features: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Cosine similarity between a feature vector and every finalized prototype.

    A zero-norm feature (or a degenerate zero prototype) yields similarity 0
    for the affected entries by convention.
    """
    if not bank.finalized:
        raise StateError("prototype bank not finalized; call finalize() before inference")
    return similarity_against(features, bank.prototypes)


def similarity_against(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    fn = np.linalg.norm(f)
    if fn == 0:
        return np.zeros(prototypes.shape[0])
    pn = np.linalg.norm(prototypes, axis=1)
    sims = np.zeros(prototypes.shape[0])
    ok = pn > 0
    sims[ok] = (prototypes[ok] @ f) / (pn[ok] * fn)
    return np.clip(sims, -1.0, 1.0)


def route(
    gate_probs: np.ndarray,
    sims: np.ndarray,
    tau: float = 0.1,
    mode: str = "product",
) -> np.ndarray:
    """Dynamic routing weights: r_j proportional to gate_j * exp(sim_j / tau).

    The multiplicative temperature-sharpened combination keeps both signals
    and reduces to the gate alone when similarities are equal. ``mode`` allows
    the ablations gate_only and sim_only.
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    g = np.asarray(gate_probs, dtype=np.float64)
    s = np.asarray(sims, dtype=np.float64)
    if g.shape != s.shape or g.ndim != 1:
        raise ConfigurationError(f"route inputs must be equal-length vectors, got {g.shape}/{s.shape}")
    if mode == "gate_only":
        logits = np.log(np.maximum(g, 1e-300))
    elif mode == "sim_only":
        logits = s / tau
    elif mode == "product":
        logits = np.log(np.maximum(g, 1e-300)) + s / tau
    else:
        raise ConfigurationError(f"unknown routing mode {mode!r}")
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def infer_domain(routing: np.ndarray) -> int:
    """Argmax routing weight; ties break toward the lowest domain id."""
    return int(np.argmax(routing))


def mask_logits(
    union_logits: Tensor | np.ndarray,
    routing: np.ndarray,
    registry: DomainRegistry,
    mode: str = "hard",
) -> tuple[np.ndarray, int]:
    """Suppress or modulate union channels according to the routing weights.

    hard: keep only the inferred domain's channels, fill the rest with a large
    negative constant. soft: multiply each channel by sum_j r_j * mask_j.
    Returns the masked logits and the inferred domain id.
    """
    logits = union_logits.data if isinstance(union_logits, Tensor) else np.asarray(union_logits)
    routing = np.asarray(routing, dtype=np.float64)
    if routing.shape != (registry.n_domains,):
        raise ConfigurationError(
            f"routing length {routing.shape} != n_domains {registry.n_domains}"
        )
    if logits.shape[1] != registry.n_union:
        raise ConfigurationError(
            f"logit channels {logits.shape[1]} != union size {registry.n_union}"
        )
    inferred = infer_domain(routing)
    if mode == "hard":
        keep = registry.masks[inferred]
        out = np.where(keep[None, :, None, None, None], logits, NEG_FILL)
    elif mode == "soft":
        modulation = routing @ registry.masks.astype(np.float64)
        out = logits * modulation[None, :, None, None, None]
    else:
        raise ConfigurationError(f"unknown mask mode {mode!r}")
    return out, inferred
