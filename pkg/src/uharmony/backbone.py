"""Toy symmetric 3D encoder-decoder segmentation network.

Encoder stage: conv3x3x3 -> nonlinearity -> normalization -> downsample.
Decoder stage: upsample -> concat skip -> conv3x3x3 -> nonlinearity ->
restoration (when the stage belongs to a harmonization pair).

Normalization is either plain instance normalization or a harmonization layer
that queues its removed statistics for the paired decoder restoration. Pairs
are assigned outermost-first: encoder stage s is paired with the decoder
stage producing the same channel count, the innermost pair (s = n_stages-1)
restoring right at the decoder entry. Channel counts double per stage, so
paired statistics extents always match.

Pooled bottleneck features (global average of the deepest post-activation,
pre-normalization map) feed the gating head and the prototype bank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError
from .gating import DomainRegistry
from .harmony import (
    HarmonyParams,
    InstanceStats,
    StatsQueue,
    affine,
    apply_restoration,
    harmonize,
)
from .tensor import Tensor

NORM_MODES = ("plain_instance_norm", "uharmony")
HEAD_MODES = ("gated_shared", "oracle_multi_head")
NONLINEARITIES = ("leaky_relu", "softplus")


@dataclass
class BackboneConfig:
    n_stages: int = 3
    base_channels: int = 8
    norm_mode: str = "uharmony"
    n_harmony_pairs: int | None = None  # defaults to n_stages (all stages paired)
    head_mode: str = "gated_shared"
    in_channels: int = 1          # expected modality count
    j_poly: int = 2
    eps: float = 1e-5
    nonlinearity: str = "leaky_relu"
    first_stage_only: bool = False   # ablation: no decoder restoration
    affine_disabled: bool = False    # ablation: skip the learnable affine stage

    def __post_init__(self):
        if self.n_stages < 1:
            raise ConfigurationError("n_stages must be >= 1")
        if self.norm_mode not in NORM_MODES:
            raise ConfigurationError(f"norm_mode must be one of {NORM_MODES}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigurationError(f"head_mode must be one of {HEAD_MODES}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigurationError(f"nonlinearity must be one of {NONLINEARITIES}")
        if self.n_harmony_pairs is None:
            self.n_harmony_pairs = self.n_stages
        if not 0 <= self.n_harmony_pairs <= self.n_stages:
            raise ConfigurationError(
                f"n_harmony_pairs must be in [0, n_stages={self.n_stages}], "
                f"got {self.n_harmony_pairs}"
            )

    def stage_channels(self, s: int) -> int:
        return self.base_channels * (2**s)

    @property
    def bottleneck_dim(self) -> int:
        return self.stage_channels(self.n_stages - 1)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.n_stages - 1)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ForwardArtifacts:
    logits: Tensor                       # (B, len(logit_channels), H, W, D)
    logit_channels: list[int]            # union channel index per logit channel
    bottleneck: Tensor                   # (B, m) pooled features
    stage_stats: list[InstanceStats] = field(default_factory=list)


def _he_kernel(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k**3))
    return rng.standard_normal((c_out, c_in, k, k, k)).astype(dtype) * dtype(std)


class SegNet:
    """Parameter container plus forward graph builder for the backbone."""

    def __init__(self, config: BackboneConfig, registry: DomainRegistry,
                 seed: int = 0, dtype=np.float64):
        self.config = config
        self.registry = registry
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng([seed, 0xBACB0E])
        cfg = config
        self.params: dict[str, Tensor] = {}
        self.harmony: dict[int, HarmonyParams] = {}

        c_prev = 2 * cfg.in_channels  # modality channels + presence indicators
        for s in range(cfg.n_stages):
            c_out = cfg.stage_channels(s)
            self._add(f"enc{s}.conv.k", _he_kernel(rng, c_out, c_prev, 3, self.dtype))
            self._add(f"enc{s}.conv.b", np.zeros(c_out, dtype=self.dtype))
            c_prev = c_out
        for s in range(cfg.n_stages - 2, -1, -1):
            c_in = cfg.stage_channels(s + 1) + cfg.stage_channels(s)
            c_out = cfg.stage_channels(s)
            self._add(f"dec{s}.conv.k", _he_kernel(rng, c_out, c_in, 3, self.dtype))
            self._add(f"dec{s}.conv.b", np.zeros(c_out, dtype=self.dtype))
        if cfg.norm_mode == "uharmony":
            for s in range(cfg.n_harmony_pairs):
                hp = HarmonyParams.init(
                    cfg.stage_channels(s), j_poly=cfg.j_poly, eps=cfg.eps, dtype=self.dtype
                )
                self.harmony[s] = hp
                for name, t in hp.tensors().items():
                    self.params[f"harmony{s}.{name}"] = t
        c0 = cfg.stage_channels(0)
        # zero-init output heads: uniform class posteriors at step 0 regardless
        # of the (domain-dependent) scale restoration gives the head input
        if cfg.head_mode == "gated_shared":
            self._add("head.k", np.zeros((registry.n_union, c0, 1, 1, 1), dtype=self.dtype))
            self._add("head.b", np.zeros(registry.n_union, dtype=self.dtype))
        else:
            for d in registry.domains:
                n_out = len(registry.loss_channels(d.domain_id))
                self._add(f"head{d.domain_id}.k", np.zeros((n_out, c0, 1, 1, 1), dtype=self.dtype))
                self._add(f"head{d.domain_id}.b", np.zeros(n_out, dtype=self.dtype))

    def _add(self, key: str, arr: np.ndarray) -> None:
        self.params[key] = Tensor(arr, requires_grad=True, name=key)

    def _nonlin(self, t: Tensor) -> Tensor:
        if self.config.nonlinearity == "leaky_relu":
            return ops.leaky_relu(t, 0.1)
        return ops.softplus(t)

    def _conv(self, t: Tensor, key: str, padding: int) -> Tensor:
        out = ops.conv3d(t, self.params[f"{key}.k"], stride=1, padding=padding)
        return ops.add_bias(out, self.params[f"{key}.b"])

    def _is_pair(self, s: int) -> bool:
        return (
            self.config.norm_mode == "uharmony"
            and s < self.config.n_harmony_pairs
        )

    def _check_spatial(self, shape) -> None:
        div = self.config.spatial_divisor
        if any(n % div for n in shape[2:]):
            raise ConfigurationError(
                f"spatial extents {tuple(shape[2:])} must be divisible by {div} "
                f"({self.config.n_stages} stages)"
            )

    def forward(self, batch: Tensor | np.ndarray, domain_id: int | None = None) -> ForwardArtifacts:
        cfg = self.config
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        self._check_spatial(x.shape)
        if cfg.head_mode == "oracle_multi_head" and domain_id is None:
            raise ConfigurationError("oracle_multi_head forward requires the true domain id")

        queue = StatsQueue()
        stage_stats: list[InstanceStats] = []
        restoring = (
            cfg.norm_mode == "uharmony"
            and not cfg.first_stage_only
            and cfg.n_harmony_pairs > 0
        )

        h = ops.adapt_modalities(x, cfg.in_channels)
        skips: list[Tensor] = []
        bottleneck_map: Tensor | None = None
        for s in range(cfg.n_stages):
            h = self._nonlin(self._conv(h, f"enc{s}.conv", padding=1))
            if s == cfg.n_stages - 1:
                bottleneck_map = h
            if self._is_pair(s):
                hp = self.harmony[s]
                xhat, stats = harmonize(h, hp.eps)
                h = xhat if cfg.affine_disabled else affine(xhat, hp)
                stage_stats.append(stats)
                if restoring:
                    queue.put(f"pair{s}", stats)
            else:
                h, _ = harmonize(h, cfg.eps)  # plain instance normalization
            if s < cfg.n_stages - 1:
                skips.append(h)
                h = ops.downsample2(h)

        bottleneck = ops.global_avg_pool(bottleneck_map)

        def restore_block(h, s):
            # Eq.-3 restoration expects harmonized-scale input (it inverts the
            # affine stage); decoder features are standardized with their own
            # instance stats first, otherwise the polynomial denominator can
            # cross zero and training destabilizes.
            h_std, _ = harmonize(h, self.harmony[s].eps)
            return apply_restoration(h_std, self.harmony[s], queue, f"pair{s}")

        if restoring and cfg.n_harmony_pairs == cfg.n_stages:
            h = restore_block(h, cfg.n_stages - 1)
        for s in range(cfg.n_stages - 2, -1, -1):
            h = ops.upsample2(h)
            h = ops.concat_channels(h, skips[s])
            h = self._nonlin(self._conv(h, f"dec{s}.conv", padding=1))
            if restoring and s < cfg.n_harmony_pairs:
                h = restore_block(h, s)

        if restoring and queue.unconsumed():
            raise ConfigurationError(f"unconsumed stats slots: {queue.unconsumed()}")

        if cfg.head_mode == "gated_shared":
            logits = self._conv(h, "head", padding=0)
            channels = list(range(self.registry.n_union))
        else:
            logits = self._conv(h, f"head{domain_id}", padding=0)
            channels = self.registry.loss_channels(domain_id)
        return ForwardArtifacts(
            logits=logits,
            logit_channels=channels,
            bottleneck=bottleneck,
            stage_stats=stage_stats,
        )

    def encoder_features(self, batch: np.ndarray) -> np.ndarray:
        """Pooled bottleneck features only; cheaper than a full forward pass."""
        cfg = self.config
        x = Tensor(np.asarray(batch, dtype=self.dtype))
        self._check_spatial(x.shape)
        h = ops.adapt_modalities(x, cfg.in_channels)
        for s in range(cfg.n_stages):
            h = self._nonlin(self._conv(h, f"enc{s}.conv", padding=1))
            if s == cfg.n_stages - 1:
                return h.data.mean(axis=(2, 3, 4))
            if self._is_pair(s):
                hp = self.harmony[s]
                xhat, _ = harmonize(h, hp.eps)
                h = xhat if cfg.affine_disabled else affine(xhat, hp)
            else:
                h, _ = harmonize(h, cfg.eps)
            h = ops.downsample2(h)
        raise AssertionError("unreachable")
