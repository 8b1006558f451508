"""Joint training over multiple domain manifests.

Batches are drawn round-robin across domains, one domain per batch, so that
per-instance statistics and channel masks stay homogeneous within a batch.
Every source of randomness is derived from (seed, epoch, counter) seed
sequences, which makes runs reproducible and lets a resumed run replay the
exact remaining stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .backbone import BackboneConfig, SegNet
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import DTYPES, TrainConfig
from .errors import ConfigurationError, NumericalAbort
from .gating import DomainRegistry, GateParams, PrototypeBank
from .losses import cross_entropy, dice, masked_seg_loss
from .optim import AdamW, lr_at
from .synthdata import DatasetManifest, augment, crop_patch
from .tensor import GradTape, Tensor
from .evaluate import infer_sample

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,domain,class,dsc,loss,domain_acc"


def registry_from_manifests(manifests: list[DatasetManifest]) -> DomainRegistry:
    names = [m.spec.name for m in manifests]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate domain names across manifests: {names}")
    return DomainRegistry.from_label_sets({m.spec.name: list(m.spec.label_set) for m in manifests})


@dataclass
class TrainState:
    """Everything the loop mutates; also the unit of checkpointing."""

    net: SegNet
    gate: GateParams | None
    bank: PrototypeBank | None
    opt: AdamW
    params: dict[str, Tensor]
    epoch: int = 0


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    rows: list[dict]
    state: TrainState
    registry: DomainRegistry
    train_loss_history: list[dict]  # per (epoch, domain): loss, dice_loss, ce


def _build_state(cfg: TrainConfig, bcfg: BackboneConfig, registry: DomainRegistry) -> TrainState:
    dtype = np.dtype(DTYPES[cfg.dtype])
    net = SegNet(bcfg, registry, seed=cfg.seed, dtype=dtype)
    params = dict(net.params)
    gate = None
    bank = None
    if bcfg.head_mode == "gated_shared":
        gate = GateParams.init(registry.n_domains, bcfg.bottleneck_dim, dtype=dtype)
        params["gate.W"] = gate.W
        params["gate.B"] = gate.B
        bank = PrototypeBank(registry.n_domains, bcfg.bottleneck_dim, cfg.proto_momentum)
    opt = AdamW(
        params,
        weight_decay=cfg.weight_decay,
        lr_scale=lambda key: cfg.harmony_lr_scale if key.startswith("harmony") else 1.0,
    )
    return TrainState(net=net, gate=gate, bank=bank, opt=opt, params=params)


def state_to_checkpoint(state: TrainState, cfg: TrainConfig, registry: DomainRegistry) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for key, p in state.params.items():
        arrays[f"param/{key}"] = p.data
        arrays[f"adam_m/{key}"] = state.opt.m[key]
        arrays[f"adam_v/{key}"] = state.opt.v[key]
    arrays["adam_t"] = np.array([state.opt.t], dtype=np.int64)
    if state.bank is not None:
        arrays["bank/ema"] = state.bank.ema
        arrays["bank/ema_counts"] = state.bank.ema_counts
        arrays["bank/sums"] = state.bank.sums
        arrays["bank/counts"] = state.bank.counts
        if state.bank.prototypes is not None:
            arrays["bank/prototypes"] = state.bank.prototypes
    return Checkpoint(
        epoch=state.epoch,
        train_config=cfg.to_dict(),
        backbone_config=state.net.config.to_dict(),
        registry_doc={"domains": [
            {"id": d.domain_id, "name": d.name, "classes": list(d.classes)}
            for d in registry.domains
        ]},
        arrays=arrays,
    )


def state_from_checkpoint(ckpt: Checkpoint) -> tuple[TrainState, TrainConfig, DomainRegistry]:
    cfg = TrainConfig(**ckpt.train_config)
    bcfg = BackboneConfig(**ckpt.backbone_config)
    registry = DomainRegistry.from_label_sets(
        {d["name"]: d["classes"] for d in ckpt.registry_doc["domains"]}
    )
    state = _build_state(cfg, bcfg, registry)
    dtype = np.dtype(DTYPES[cfg.dtype])
    for key, p in state.params.items():
        p.data = ckpt.arrays[f"param/{key}"].astype(dtype, copy=True)
        state.opt.m[key] = ckpt.arrays[f"adam_m/{key}"].astype(dtype, copy=True)
        state.opt.v[key] = ckpt.arrays[f"adam_v/{key}"].astype(dtype, copy=True)
    state.opt.t = int(ckpt.arrays["adam_t"][0])
    if state.bank is not None:
        state.bank.ema = ckpt.arrays["bank/ema"].copy()
        state.bank.ema_counts = ckpt.arrays["bank/ema_counts"].copy()
        state.bank.sums = ckpt.arrays["bank/sums"].copy()
        state.bank.counts = ckpt.arrays["bank/counts"].copy()
        if "bank/prototypes" in ckpt.arrays:
            state.bank.prototypes = ckpt.arrays["bank/prototypes"].copy()
    state.epoch = ckpt.epoch
    return state, cfg, registry


def _load_split(manifests, split):
    data = []
    for m in manifests:
        data.append([m.load(e) for e in m.samples(split)])
    return data


def _format_acc(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def _epoch_batches(cfg, registry, train_data, epoch):
    """Round-robin batch plan: (domain_id, sample indices) tuples."""
    queues = []
    for d in range(registry.n_domains):
        order = np.random.default_rng([cfg.seed, 101, epoch, d]).permutation(
            len(train_data[d])
        )
        queues.append(list(order))
    plan = []
    while any(queues):
        for d in range(registry.n_domains):
            if queues[d]:
                take, queues[d] = queues[d][: cfg.batch_size], queues[d][cfg.batch_size:]
                plan.append((d, take))
    return plan


def _make_batch(cfg, spec_dtype, samples, idxs, rng):
    vols, labs = [], []
    for i in idxs:
        vol, lab = samples[int(i)]
        vol, lab = augment(vol, lab, rng)
        vol, lab = crop_patch(vol, lab, cfg.patch_extent, rng, fg_bias=cfg.fg_bias)
        vols.append(vol)
        labs.append(lab)
    return np.stack(vols).astype(spec_dtype), np.stack(labs)


def _finalize_prototypes(state: TrainState, train_data, chunk: int = 8) -> None:
    """Exact-mean prototype pass over the full training set, no augmentation."""
    bank = state.bank
    bank.reset_records()
    for d, samples in enumerate(train_data):
        for start in range(0, len(samples), chunk):
            batch = np.stack([v for v, _ in samples[start : start + chunk]])
            feats = state.net.encoder_features(batch)
            for f in feats:
                bank.update(d, f)
    bank.finalize()


def _val_metrics(state, cfg, registry, val_data, epoch, epoch_loss):
    rows = []
    for d in range(registry.n_domains):
        samples = val_data[d][: cfg.val_subset] if cfg.val_subset else val_data[d]
        per_class = {c: [] for c in registry.domains[d].classes}
        correct = 0
        for vol, lab in samples:
            pred_union, inferred = infer_sample(
                state.net, state.gate, state.bank, registry, vol,
                tau=cfg.tau, route_mode=cfg.route_mode, true_domain=d,
            )
            if inferred is None or inferred == d:
                correct += 1
            for li, cls in enumerate(registry.domains[d].classes, start=1):
                u = registry.union_index(cls)
                per_class[cls].append(dice(pred_union == u, lab == li))
        acc = None
        if state.gate is not None and samples:
            acc = correct / len(samples)
        for cls, vals in per_class.items():
            rows.append({
                "epoch": epoch,
                "domain": registry.domains[d].name,
                "class": cls,
                "dsc": float(np.mean(vals)) if vals else float("nan"),
                "loss": epoch_loss.get(d, float("nan")),
                "domain_acc": acc,
            })
    return rows


def train(
    cfg: TrainConfig,
    bcfg: BackboneConfig,
    manifests: list[DatasetManifest],
    out_dir,
    resume_from=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the joint-training loop; see the module docstring.

    ``stop_after`` pauses after that epoch with a resumable checkpoint
    (prototypes are only finalized once the full horizon is reached).
    """
    if not manifests:
        raise ConfigurationError("need at least one dataset manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    registry = registry_from_manifests(manifests)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        state, loaded_cfg, loaded_reg = state_from_checkpoint(ckpt)
        want = state_to_checkpoint(state, cfg, registry).hash
        if ckpt.hash != want:
            raise ConfigurationError(
                "resume checkpoint was produced under a different config/registry"
            )
        cfg = loaded_cfg
    else:
        state = _build_state(cfg, bcfg, registry)

    spec_dtype = np.dtype(DTYPES[cfg.dtype])
    train_data = _load_split(manifests, "train")
    val_data = _load_split(manifests, "val")
    if any(len(s) == 0 for s in train_data):
        raise ConfigurationError("every domain needs at least one training sample")

    rows: list[dict] = []
    history: list[dict] = []
    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.uhckpt"
    last_epoch = cfg.total_epochs if stop_after is None else min(stop_after, cfg.total_epochs)

    for epoch in range(state.epoch + 1, last_epoch + 1):
        lr = lr_at(epoch, cfg.lr_init, cfg.warmup_epochs, cfg.total_epochs)
        plan = _epoch_batches(cfg, registry, train_data, epoch)
        loss_sums: dict[int, float] = {}
        part_sums: dict[int, dict[str, float]] = {}
        loss_counts: dict[int, int] = {}
        for step, (d, idxs) in enumerate(plan):
            rng = np.random.default_rng([cfg.seed, 202, epoch, step])
            x, y = _make_batch(cfg, spec_dtype, train_data[d], idxs, rng)
            with GradTape() as tape:
                art = state.net.forward(
                    x, domain_id=d if bcfg.head_mode == "oracle_multi_head" else None
                )
                loss, parts = masked_seg_loss(
                    art.logits, y, d, registry,
                    w_dice=cfg.w_dice, w_ce=cfg.w_ce,
                    logit_channels=art.logit_channels,
                )
                if state.gate is not None and cfg.w_domain > 0:
                    feats = art.bottleneck
                    if not cfg.gate_end_to_end:
                        feats = Tensor(feats.data.copy())
                    gate_logits = ops.linear(feats, state.gate.W, state.gate.B)
                    aux = cross_entropy(gate_logits, np.full(len(idxs), d, dtype=np.int64))
                    loss = ops.add(loss, ops.scale(aux, cfg.w_domain))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"domain {registry.domains[d].name!r}"
                )
            tape.backward(loss)
            state.opt.step(lr)
            if state.bank is not None:
                state.bank.update(d, art.bottleneck.data.mean(axis=0))
            loss_sums[d] = loss_sums.get(d, 0.0) + loss_val
            acc = part_sums.setdefault(d, {"dice_loss": 0.0, "ce": 0.0})
            for k in acc:
                acc[k] += parts[k]
            loss_counts[d] = loss_counts.get(d, 0) + 1
        state.epoch = epoch
        epoch_loss = {d: loss_sums[d] / loss_counts[d] for d in loss_sums}
        for d, n in loss_counts.items():
            history.append({
                "epoch": epoch,
                "domain": registry.domains[d].name,
                "loss": epoch_loss[d],
                "dice_loss": part_sums[d]["dice_loss"] / n,
                "ce": part_sums[d]["ce"] / n,
            })
        rows.extend(_val_metrics(state, cfg, registry, val_data, epoch, epoch_loss))
        log.info("epoch %d lr %.2e loss %s", epoch, lr,
                 {registry.domains[d].name: round(v, 4) for d, v in epoch_loss.items()})

    if state.bank is not None and state.epoch >= cfg.total_epochs:
        _finalize_prototypes(state, train_data)

    save_checkpoint(ckpt_path, state_to_checkpoint(state, cfg, registry))
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r['epoch']},{r['domain']},{r['class']},{r['dsc']:.6f},"
            f"{r['loss']:.6f},{_format_acc(r['domain_acc'])}"
        )
    metrics_path.write_text("\n".join(lines) + "\n")
    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        rows=rows,
        state=state,
        registry=registry,
        train_loss_history=history,
    )
