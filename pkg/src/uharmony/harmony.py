"""Two-stage feature harmonization and restoration.

Stage one standardizes each feature map per sample and channel over its
spatial positions, removing instance-specific intensity statistics:

    xhat[i,c,p] = (x[i,c,p] - mu[i,c]) / sqrt(var[i,c] + eps)

A learnable affine map with higher-order polynomial terms then compensates
for the removed information:

    xtilde = w[c] * xhat + b[c] + sum_j lambda[c,j] * xhat^j     (j = 1..J)

Stage two, applied later in the decoder, selectively restores the carried
statistics through an inverse-style rational map with its own coefficients:

    y = sigma[i,c] * (xtilde - b[c] - sum_j gamma[c,j] * xtilde^j)
                   / (w[c] + eps + sum_j delta[c,j] * xtilde^j)  + mu[i,c]

At standard initialization (w=1, b=0, lambda=gamma=delta=0) the three maps
compose to the identity up to O(eps), so a network using them starts from
exactly the plain instance-normalization behavior in the encoder.

sigma is stored as sqrt(var + eps), which makes the stage-two multiplication
undo the stage-one division exactly at initialization. The restoration
denominator is clamped away from zero (preserving sign, sign(0) treated as
positive); the clamp has no effect at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, PairingError
from .tensor import Tensor, apply_op

DENOM_FLOOR = 1e-3


@dataclass
class HarmonyParams:
    """Learnable coefficients of one harmonization/restoration pair."""

    w: Tensor          # (C,) scale
    b: Tensor          # (C,) shift
    lam: Tensor        # (C, J) polynomial coefficients of the affine stage
    gamma: Tensor      # (C, J) restoration numerator coefficients
    delta: Tensor      # (C, J) restoration denominator coefficients
    eps: float = 1e-5
    j_poly: int = 2

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if self.j_poly < 0:
            raise ConfigurationError("j_poly must be >= 0")
        c = self.w.shape[0]
        want = (c, self.j_poly)
        for name, t, shape in (
            ("w", self.w, (c,)),
            ("b", self.b, (c,)),
            ("lam", self.lam, want),
            ("gamma", self.gamma, want),
            ("delta", self.delta, want),
        ):
            if t.shape != shape:
                raise ConfigurationError(f"HarmonyParams.{name} shape {t.shape}, expected {shape}")

    @classmethod
    def init(cls, channels: int, j_poly: int = 2, eps: float = 1e-5,
             dtype=np.float64) -> "HarmonyParams":
        """Standard initialization: w=1, b=0, lambda=gamma=delta=0 (identity stack)."""
        return cls(
            w=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            b=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            lam=Tensor(np.zeros((channels, j_poly), dtype=dtype), requires_grad=True),
            gamma=Tensor(np.zeros((channels, j_poly), dtype=dtype), requires_grad=True),
            delta=Tensor(np.zeros((channels, j_poly), dtype=dtype), requires_grad=True),
            eps=eps,
            j_poly=j_poly,
        )

    @property
    def channels(self) -> int:
        return self.w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b, "lam": self.lam,
                "gamma": self.gamma, "delta": self.delta}


@dataclass
class InstanceStats:
    """Per-(sample, channel) spatial mean and sqrt(var + eps), carried encoder to decoder."""

    mu: Tensor     # (B, C)
    sigma: Tensor  # (B, C)

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.data.ndim != 2:
            raise ConfigurationError(
                f"stats shapes mu{self.mu.shape} sigma{self.sigma.shape} invalid"
            )

    @property
    def batch_channels(self) -> tuple[int, int]:
        return self.mu.shape  # type: ignore[return-value]


def _bc(v: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a (B, C) array for broadcasting against a (B, C, spatial) map."""
    return v.reshape(v.shape + (1,) * (ndim - 2))


def _ch(v: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a (C,) array for broadcasting against a (B, C, spatial) map."""
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def harmonize(x: Tensor, eps: float) -> tuple[Tensor, InstanceStats]:
    """First-stage harmonization: per-(sample, channel) spatial standardization.

    Returns the standardized map and the statistics it removed. Gradients flow
    through all three outputs, including the dependence of mu and sigma on x.
    """
    if x.data.ndim != 5:
        raise ConfigurationError(f"harmonize expects a 5-axis feature map, got {x.shape}")
    if eps <= 0:
        raise ConfigurationError("harmonize eps must be positive")
    xd = x.data
    if not np.isfinite(xd).all():
        bad = np.argwhere(~np.isfinite(xd))[0]
        raise InputError(
            f"non-finite feature value at sample {bad[0]}, channel {bad[1]}"
        )
    axes = (2, 3, 4)
    npos = int(np.prod([xd.shape[i] for i in axes]))
    mu = xd.mean(axis=axes)
    var = ((xd - _bc(mu, 5)) ** 2).mean(axis=axes)
    sigma = np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - _bc(mu, 5)) / _bc(sigma, 5)

    def backward(g_xhat, g_mu, g_sigma):
        inv_sigma = 1.0 / _bc(sigma, 5)
        gx = np.zeros_like(xd)
        if g_xhat is not None:
            gbar = g_xhat.mean(axis=axes)
            gxbar = (g_xhat * xhat).mean(axis=axes)
            gx += inv_sigma * (g_xhat - _bc(gbar, 5) - xhat * _bc(gxbar, 5))
        if g_mu is not None:
            gx += _bc(g_mu, 5) / npos
        if g_sigma is not None:
            # d sigma / dx_q = (x_q - mu) / (npos * sigma) = xhat_q / npos
            gx += _bc(g_sigma, 5) * xhat / npos
        return (gx,)

    xhat_t, mu_t, sigma_t = apply_op("harmonize", (x,), (xhat, mu, sigma), backward)
    return xhat_t, InstanceStats(mu=mu_t, sigma=sigma_t)


def affine(xhat: Tensor, params: HarmonyParams) -> Tensor:
    """Learnable scale/shift with higher-order polynomial terms (stage one, part two)."""
    if xhat.shape[1] != params.channels:
        raise ConfigurationError(
            f"affine channel mismatch: feature {xhat.shape} vs params C={params.channels}"
        )
    xd = xhat.data
    nd = xd.ndim
    w, b, lam = params.w.data, params.b.data, params.lam.data
    jp = params.j_poly
    powers = [xd]
    for _ in range(1, jp):
        powers.append(powers[-1] * xd)
    out = _ch(w, nd) * xd + _ch(b, nd)
    for j in range(jp):
        out = out + _ch(lam[:, j], nd) * powers[j]

    def backward(g):
        red_axes = (0,) + tuple(range(2, nd))
        deriv = _ch(w, nd) * np.ones_like(xd)
        for j in range(jp):  # d/dx lam_j x^(j+1) = (j+1) lam_j x^j
            xj = powers[j - 1] if j >= 1 else np.ones_like(xd)
            deriv = deriv + (j + 1) * _ch(lam[:, j], nd) * xj
        gx = g * deriv
        gw = (g * xd).sum(axis=red_axes)
        gb = g.sum(axis=red_axes)
        glam = np.empty_like(lam)
        for j in range(jp):
            glam[:, j] = (g * powers[j]).sum(axis=red_axes)
        return gx, gw, gb, glam

    return apply_op("harmony_affine", (xhat, params.w, params.b, params.lam), out, backward)


def restore(xtilde: Tensor, params: HarmonyParams, stats: InstanceStats) -> Tensor:
    """Second-stage restoration: reintroduce the carried (mu, sigma) statistics.

    The denominator w + eps + sum_j delta_j x^j is clamped to keep its
    magnitude >= DENOM_FLOOR while preserving sign; inside the clamped region
    the denominator path contributes zero gradient.
    """
    if xtilde.shape[1] != params.channels:
        raise ConfigurationError(
            f"restore channel mismatch: feature {xtilde.shape} vs params C={params.channels}"
        )
    if stats.batch_channels != (xtilde.shape[0], xtilde.shape[1]):
        raise ConfigurationError(
            f"restore stats extents {stats.batch_channels} do not match feature {xtilde.shape[:2]}"
        )
    xd = xtilde.data
    nd = xd.ndim
    w, b = params.w.data, params.b.data
    gam, dlt = params.gamma.data, params.delta.data
    sig, mu = stats.sigma.data, stats.mu.data
    jp = params.j_poly
    eps = xd.dtype.type(params.eps)

    powers = [xd]
    for _ in range(1, jp):
        powers.append(powers[-1] * xd)
    floor = xd.dtype.type(DENOM_FLOOR)
    num = xd - _ch(b, nd)
    den_raw = _ch(w, nd) + eps * np.ones_like(xd)
    for j in range(jp):
        num = num - _ch(gam[:, j], nd) * powers[j]
        den_raw = den_raw + _ch(dlt[:, j], nd) * powers[j]
    free = np.abs(den_raw) >= floor
    den = np.where(free, den_raw, np.where(den_raw >= 0, floor, -floor))
    ratio = num / den
    out = _bc(sig, nd) * ratio + _bc(mu, nd)

    def backward(g):
        red_axes = (0,) + tuple(range(2, nd))
        sp_axes = tuple(range(2, nd))
        common = g * _bc(sig, nd) / den
        num_prime = np.ones_like(xd)
        den_prime = np.zeros_like(xd)
        for j in range(jp):
            xj = powers[j - 1] if j >= 1 else np.ones_like(xd)
            num_prime = num_prime - (j + 1) * _ch(gam[:, j], nd) * xj
            den_prime = den_prime + (j + 1) * _ch(dlt[:, j], nd) * xj
        den_prime = den_prime * free
        gx = common * (num_prime - ratio * den_prime)
        gw = -(common * ratio * free).sum(axis=red_axes)
        gb = -common.sum(axis=red_axes)
        ggam = np.empty_like(gam)
        gdlt = np.empty_like(dlt)
        for j in range(jp):
            ggam[:, j] = -(common * powers[j]).sum(axis=red_axes)
            gdlt[:, j] = -(common * ratio * powers[j] * free).sum(axis=red_axes)
        gsig = (g * ratio).sum(axis=sp_axes)
        gmu = g.sum(axis=sp_axes)
        return gx, gw, gb, ggam, gdlt, gsig, gmu

    return apply_op(
        "harmony_restore",
        (xtilde, params.w, params.b, params.gamma, params.delta, stats.sigma, stats.mu),
        out,
        backward,
    )


class StatsQueue:
    """Pairing discipline for statistics carried from encoder to decoder.

    Each encoder harmonization layer queues its stats under a layer key; the
    paired decoder restoration consumes them exactly once per forward pass.
    """

    def __init__(self):
        self._slots: dict[str, InstanceStats] = {}

    def put(self, key: str, stats: InstanceStats) -> None:
        if key in self._slots:
            raise PairingError(f"stats slot {key!r} already queued and not yet consumed")
        self._slots[key] = stats

    def take(self, key: str) -> InstanceStats:
        if key not in self._slots:
            raise PairingError(f"no queued stats for layer key {key!r}")
        return self._slots.pop(key)

    def unconsumed(self) -> list[str]:
        return sorted(self._slots)


def harmony_layer_forward(
    x: Tensor, params: HarmonyParams, queue: StatsQueue | None = None, key: str = "",
) -> tuple[Tensor, InstanceStats]:
    """Encoder-side layer: harmonize then affine, queueing stats for the decoder."""
    xhat, stats = harmonize(x, params.eps)
    out = affine(xhat, params)
    if queue is not None:
        queue.put(key, stats)
    return out, stats


def apply_restoration(
    decoder_feature: Tensor, params: HarmonyParams, queue: StatsQueue, key: str,
) -> Tensor:
    """Decoder-side layer: restore with the stats queued under ``key``."""
    stats = queue.take(key)
    return restore(decoder_feature, params, stats)
