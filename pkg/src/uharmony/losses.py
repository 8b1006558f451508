"""Segmentation metrics and the masked multi-domain training loss.

Training supervises only the channels belonging to the sample's domain
(background plus its own label set); all other union channels are excluded
from the graph and therefore receive exactly zero gradient.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigurationError, DataError
from .gating import DomainRegistry
from .tensor import Tensor, apply_op

DICE_SMOOTH = 1e-5


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Hard Dice overlap 2|P&G| / (|P|+|G|); two empty masks count as 1."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ConfigurationError(f"dice mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over the channel axis (axis 1)."""
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        s = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - s),)

    return apply_op("softmax_channels", (logits,), out, backward)


def _one_hot(targets: np.ndarray, k: int, dtype) -> np.ndarray:
    oh = np.zeros((targets.shape[0], k) + targets.shape[1:], dtype=dtype)
    idx = np.expand_dims(targets, 1)
    np.put_along_axis(oh, idx, 1.0, axis=1)
    return oh


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean voxelwise cross-entropy, fused with a stable log-softmax.

    logits: (B, K) or (B, K, spatial...); targets: matching integer array of
    shape (B,) or (B, spatial...) with values in [0, K).
    """
    xd = logits.data
    k = xd.shape[1]
    targets = np.asarray(targets)
    if targets.shape != xd.shape[:1] + xd.shape[2:]:
        raise ConfigurationError(
            f"targets shape {targets.shape} incompatible with logits {xd.shape}"
        )
    if targets.min() < 0 or targets.max() >= k:
        raise ConfigurationError(f"target index outside [0, {k})")
    shifted = xd - xd.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, np.expand_dims(targets, 1), axis=1)
    n = picked.size
    out = np.asarray(-picked.sum() / n, dtype=xd.dtype)

    def backward(g):
        probs = np.exp(logp)
        grad = (probs - _one_hot(targets, k, xd.dtype)) * (np.asarray(g) / n)
        return (grad,)

    return apply_op("cross_entropy", (logits,), out, backward)


def soft_dice_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """1 - mean soft Dice over foreground channels (channel 0 is background)."""
    pd = probs.data
    k = pd.shape[1]
    if k < 2:
        raise ConfigurationError("soft_dice_loss needs at least one foreground channel")
    oh = _one_hot(np.asarray(targets), k, pd.dtype)
    axes = (0,) + tuple(range(2, pd.ndim))
    inter = (pd * oh).sum(axis=axes)         # (K,)
    psum = pd.sum(axis=axes)
    tsum = oh.sum(axis=axes)
    num = 2.0 * inter + DICE_SMOOTH
    den = psum + tsum + DICE_SMOOTH
    d = num / den
    fg = slice(1, k)
    out = np.asarray(1.0 - d[fg].mean(), dtype=pd.dtype)

    def backward(g):
        shape = (1, -1) + (1,) * (pd.ndim - 2)
        coef = np.zeros(k, dtype=pd.dtype)
        coef[fg] = 1.0 / (k - 1)
        # d d_c / d p_cv = (2 t_cv * den_c - num_c) / den_c^2
        grad = -(2.0 * oh * den.reshape(shape) - num.reshape(shape)) / den.reshape(shape) ** 2
        grad = grad * coef.reshape(shape) * np.asarray(g)
        return (grad,)

    return apply_op("soft_dice_loss", (probs,), out, backward)


def masked_seg_loss(
    logits: Tensor,
    labelmap: np.ndarray,
    domain_id: int,
    registry: DomainRegistry,
    w_dice: float = 0.5,
    w_ce: float = 0.5,
    logit_channels: list[int] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Soft-Dice + cross-entropy over the domain's own channels only.

    ``labelmap`` holds domain-local class indices (0 = background, i = i-th
    class of the domain's label set). ``logit_channels`` states which union
    channels the logits carry; full-union logits are sliced down to the
    domain's loss channels, oracle heads must already match them.
    """
    allowed = registry.loss_channels(domain_id)
    d = registry.check_id(domain_id)
    labelmap = np.asarray(labelmap)
    bad = labelmap[(labelmap < 0) | (labelmap > len(d.classes))]
    if bad.size:
        first = np.argwhere((labelmap < 0) | (labelmap > len(d.classes)))[0]
        raise DataError(
            f"label {int(bad.flat[0])} at sample {int(first[0])} outside the label set "
            f"of domain {d.name!r} ({len(d.classes)} classes)"
        )
    if logit_channels is None or logit_channels == list(range(registry.n_union)):
        sub = ops.slice_channels(logits, allowed)
    elif logit_channels == allowed:
        sub = logits
    else:
        raise ConfigurationError(
            f"logit channels {logit_channels} match neither the union space nor "
            f"the loss channels {allowed} of domain {d.name!r}"
        )
    ce = cross_entropy(sub, labelmap)
    dl = soft_dice_loss(softmax_channels(sub), labelmap)
    loss = ops.add(ops.scale(dl, w_dice), ops.scale(ce, w_ce))
    return loss, {"dice_loss": float(dl.data), "ce": float(ce.data)}
