"""Evaluation: per-domain per-class DSC tables and domain-inference accuracy.

dataset_free mode never reads a sample's domain id for inference; the id is
used only post hoc to pick the ground-truth channels and score inference
accuracy. oracle mode feeds the true id (separate heads, or true-id masking
for a shared head).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, StateError
from .gating import (
    DomainRegistry,
    GateParams,
    PrototypeBank,
    infer_domain,
    mask_logits,
    route,
    similarity_against,
)
from .losses import dice
from .synthdata import DatasetManifest

EVAL_MODES = ("dataset_free", "oracle")


def _gate_probs(features: np.ndarray, gate: GateParams) -> np.ndarray:
    z = gate.W.data @ features + gate.B.data
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def predict_sample(
    net,
    registry: DomainRegistry,
    volume: np.ndarray,
    gate: GateParams | None = None,
    bank: PrototypeBank | None = None,
    tau: float = 0.1,
    route_mode: str = "product",
    oracle_domain: int | None = None,
) -> tuple[np.ndarray, int | None]:
    """Union-space label prediction for one volume.

    Returns (predicted union labels, inferred domain id). The inferred id is
    None when the true id was fed (oracle paths).
    """
    x = volume[None].astype(net.dtype)
    if net.config.head_mode == "oracle_multi_head":
        if oracle_domain is None:
            raise ConfigurationError("oracle_multi_head prediction requires the true domain id")
        art = net.forward(x, domain_id=oracle_domain)
        local = art.logits.data[0].argmax(axis=0)
        channels = np.asarray(art.logit_channels)
        return channels[local], None

    art = net.forward(x)
    logits = art.logits.data
    if oracle_domain is not None:
        routing = np.zeros(registry.n_domains)
        routing[oracle_domain] = 1.0
        inferred = None
    else:
        if gate is None or bank is None:
            raise ConfigurationError("dataset-free prediction needs gate parameters and prototypes")
        feats = art.bottleneck.data[0]
        probs = _gate_probs(feats, gate)
        sims = similarity_against(feats, bank.current_prototypes())
        routing = route(probs, sims, tau=tau, mode=route_mode)
        inferred = infer_domain(routing)
    masked, _ = mask_logits(logits, routing, registry, "hard")
    pred = masked[0].argmax(axis=0)
    return pred, inferred


def infer_sample(net, gate, bank, registry, volume, tau, route_mode, true_domain):
    """Helper for mid-training validation: dataset-free for gated heads,
    true-id for oracle heads. Returns (pred_union, inferred_or_None)."""
    if net.config.head_mode == "oracle_multi_head":
        return predict_sample(net, registry, volume, oracle_domain=true_domain)
    return predict_sample(
        net, registry, volume, gate=gate, bank=bank, tau=tau, route_mode=route_mode
    )


@dataclass
class EvalReport:
    mode: str
    split: str
    class_dsc: dict[tuple[str, str], float] = field(default_factory=dict)
    domain_avg: dict[str, float] = field(default_factory=dict)
    domain_std: dict[str, float] = field(default_factory=dict)
    domain_acc: dict[str, float] = field(default_factory=dict)
    n_samples: dict[str, int] = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"mode={self.mode} split={self.split}"]
        lines.append(f"{'domain':<12s} {'class':<12s} {'dsc':>8s}")
        for (dom, cls), v in self.class_dsc.items():
            lines.append(f"{dom:<12s} {cls:<12s} {v:8.4f}")
        for dom in self.domain_avg:
            lines.append(
                f"{dom:<12s} {'average':<12s} {self.domain_avg[dom]:8.4f}"
                f"  (std {self.domain_std[dom]:.4f})"
            )
        if self.domain_acc:
            accs = "  ".join(f"{d}={v:.4f}" for d, v in self.domain_acc.items())
            lines.append(f"domain inference accuracy: {accs}")
        return "\n".join(lines)

    def csv_lines(self) -> list[str]:
        lines = ["domain,class,dsc"]
        for (dom, cls), v in self.class_dsc.items():
            lines.append(f"{dom},{cls},{v:.6f}")
        for dom in self.domain_avg:
            lines.append(f"{dom},average,{self.domain_avg[dom]:.6f}")
            lines.append(f"{dom},std,{self.domain_std[dom]:.6f}")
        for dom, v in self.domain_acc.items():
            lines.append(f"{dom},domain_acc,{v:.6f}")
        return lines


def evaluate(
    net,
    registry: DomainRegistry,
    manifests: list[DatasetManifest],
    mode: str = "dataset_free",
    split: str = "test",
    gate: GateParams | None = None,
    bank: PrototypeBank | None = None,
    tau: float = 0.1,
    route_mode: str = "product",
) -> EvalReport:
    if mode not in EVAL_MODES:
        raise ConfigurationError(f"mode must be one of {EVAL_MODES}")
    names = {m.spec.name: m for m in manifests}
    if sorted(names) != sorted(d.name for d in registry.domains):
        raise ConfigurationError(
            f"manifest domains {sorted(names)} do not match registry "
            f"{sorted(d.name for d in registry.domains)}"
        )
    for d in registry.domains:
        if tuple(names[d.name].spec.label_set) != d.classes:
            raise ConfigurationError(
                f"class set mismatch for domain {d.name!r}: manifest "
                f"{names[d.name].spec.label_set} vs registry {list(d.classes)}"
            )
    if mode == "dataset_free":
        if net.config.head_mode == "oracle_multi_head":
            raise ConfigurationError("an oracle_multi_head model cannot run dataset-free")
        if bank is None or not bank.finalized:
            raise StateError("dataset-free evaluation requires finalized prototypes")

    report = EvalReport(mode=mode, split=split)
    for d in registry.domains:
        manifest = names[d.name]
        samples = manifest.samples(split)
        per_class: dict[str, list[float]] = {c: [] for c in d.classes}
        correct = 0
        for entry in samples:
            vol, lab = manifest.load(entry)
            if mode == "oracle":
                pred, inferred = predict_sample(
                    net, registry, vol, gate=gate, bank=bank, tau=tau,
                    route_mode=route_mode, oracle_domain=d.domain_id,
                )
            else:
                pred, inferred = predict_sample(
                    net, registry, vol, gate=gate, bank=bank, tau=tau, route_mode=route_mode,
                )
                if inferred == d.domain_id:
                    correct += 1
            for li, cls in enumerate(d.classes, start=1):
                u = registry.union_index(cls)
                per_class[cls].append(dice(pred == u, lab == li))
        means = []
        for cls in d.classes:
            v = float(np.mean(per_class[cls])) if per_class[cls] else float("nan")
            report.class_dsc[(d.name, cls)] = v
            means.append(v)
        report.domain_avg[d.name] = float(np.mean(means))
        report.domain_std[d.name] = float(np.std(means))
        report.n_samples[d.name] = len(samples)
        if mode == "dataset_free" and samples:
            report.domain_acc[d.name] = correct / len(samples)
    return report


def evaluate_checkpoint(ckpt_path, manifests, mode="dataset_free", split="test") -> EvalReport:
    from .train import state_from_checkpoint  # local import avoids a cycle
    from .checkpoint import load_checkpoint

    state, cfg, registry = state_from_checkpoint(load_checkpoint(ckpt_path))
    return evaluate(
        state.net, registry, manifests, mode=mode, split=split,
        gate=state.gate, bank=state.bank, tau=cfg.tau, route_mode=cfg.route_mode,
    )
