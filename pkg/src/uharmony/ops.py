"""Differentiable operations: forward maps plus vector-Jacobian backward maps.

Each function runs eagerly on numpy data and, when a GradTape is active,
records a backward closure on it. Broadcasting is restricted to the fixed
patterns the network layers need (per-channel bias, spatial maps); general
broadcasting is intentionally unsupported.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .tensor import Tensor, apply_op, check_same_dtype


def _spatial_sum(g: np.ndarray) -> np.ndarray:
    """Sum over batch and spatial axes, keeping the channel axis."""
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def add(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch {a.shape} vs {b.shape}")
    return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return apply_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return apply_op("scale", (a,), a.data * s, lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x has layout (batch, channel, ...); b has one entry per channel."""
    check_same_dtype(x, b)
    if b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ConfigurationError(f"bias shape {b.shape} does not match channels of {x.shape}")
    bb = b.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    return apply_op("add_bias", (x, b), x.data + bb, lambda g: (g, _spatial_sum(g)))


def pow_int(a: Tensor, n: int) -> Tensor:
    if n < 1:
        raise ConfigurationError("pow_int exponent must be >= 1")
    ad = a.data
    out = ad**n
    return apply_op("pow_int", (a,), out, lambda g: (g * n * ad ** (n - 1),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shapes {a.shape} @ {b.shape} invalid")
    ad, bd = a.data, b.data
    return apply_op("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Rows of x are samples: out = x @ w.T + b with w of shape (out, in)."""
    check_same_dtype(x, w, b)
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ConfigurationError(
            f"linear shapes x{x.shape} w{w.shape} b{b.shape} inconsistent"
        )
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data
    return apply_op(
        "linear", (x, w, b), out, lambda g: (g @ wd, g.T @ xd, g.sum(axis=0))
    )


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, xd, alpha * xd)
    slope = np.where(xd >= 0, x.dtype.type(1), x.dtype.type(alpha))
    return apply_op("leaky_relu", (x,), out, lambda g: (g * slope,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0, xd)
    return apply_op("softplus", (x,), out, lambda g: (g / (1 + np.exp(-xd)),))


def conv3d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (B,Cin,H,W,D) map with a (Cout,Cin,k,k,k) kernel.

    Output spatial extent per axis is floor((n + 2*padding - k)/stride) + 1.
    """
    check_same_dtype(x, k)
    if x.data.ndim != 5 or k.data.ndim != 5:
        raise ConfigurationError(f"conv3d expects 5-axis input/kernel, got {x.shape}/{k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ConfigurationError(
            f"conv3d channel mismatch: input {x.shape} vs kernel {k.shape}"
        )
    ks = k.shape[2]
    if not (k.shape[2] == k.shape[3] == k.shape[4]) or ks % 2 == 0:
        raise ConfigurationError(f"conv3d kernel must be cubic with odd extent, got {k.shape}")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv3d stride must be 1 or 2, got {stride}")
    if any(n + 2 * padding < ks for n in x.shape[2:]):
        raise ConfigurationError(
            f"conv3d input {x.shape} too small for kernel {k.shape} with padding {padding}"
        )
    xd, kd = x.data, k.data
    out = kernels.conv3d_forward(xd, kd, stride, padding)

    def backward(g):
        gx = kernels.conv3d_grad_input(g, kd, xd.shape, stride, padding)
        gk = kernels.conv3d_grad_kernel(g, xd, kd.shape, stride, padding)
        return gx, gk

    return apply_op("conv3d", (x, k), out, backward)


def downsample2(x: Tensor) -> Tensor:
    """Strided spatial downsample: keep every second voxel along each axis."""
    if x.data.ndim != 5:
        raise ConfigurationError("downsample2 expects a 5-axis tensor")
    xd = x.data
    out = np.ascontiguousarray(xd[:, :, ::2, ::2, ::2])

    def backward(g):
        gx = np.zeros_like(xd)
        gx[:, :, ::2, ::2, ::2] = g
        return (gx,)

    return apply_op("downsample2", (x,), out, backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor spatial upsampling, factor 2 along each axis."""
    if x.data.ndim != 5:
        raise ConfigurationError("upsample2 expects a 5-axis tensor")
    xd = x.data
    out = xd.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def backward(g):
        b, c, h, w, d = xd.shape
        gx = g.reshape(b, c, h, 2, w, 2, d, 2).sum(axis=(3, 5, 7))
        return (gx,)

    return apply_op("upsample2", (x,), out, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype(a, b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(f"concat_channels shape mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return apply_op(
        "concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:])
    )


def slice_channels(x: Tensor, idx: list[int]) -> Tensor:
    """Gather a channel subset; backward scatters zeros into the complement."""
    if any(i < 0 or i >= x.shape[1] for i in idx):
        raise ConfigurationError(f"channel index out of range for {x.shape}: {idx}")
    xd = x.data
    index = np.asarray(idx, dtype=np.intp)
    out = np.ascontiguousarray(xd[:, index])

    def backward(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, (slice(None), index), g)
        return (gx,)

    return apply_op("slice_channels", (x,), out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, spatial...) -> (B, C) mean over all spatial positions."""
    if x.data.ndim < 3:
        raise ConfigurationError("global_avg_pool expects spatial axes")
    xd = x.data
    axes = tuple(range(2, xd.ndim))
    npos = int(np.prod([xd.shape[i] for i in axes]))
    out = xd.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)), xd.shape) / npos,)

    return apply_op("global_avg_pool", (x,), out, backward)


def reduce_spatial(x: Tensor, kind: str) -> Tensor:
    """Per-(sample, channel) population mean or variance over spatial positions."""
    if x.data.ndim != 5:
        raise ConfigurationError(f"reduce_spatial expects 5 axes, got {x.shape}")
    if kind not in ("mean", "var"):
        raise ConfigurationError(f"reduce_spatial kind must be mean or var, got {kind!r}")
    xd = x.data
    axes = (2, 3, 4)
    npos = int(np.prod([xd.shape[i] for i in axes]))
    if kind == "mean":
        out = xd.mean(axis=axes)

        def backward(g):
            return (np.broadcast_to(g[:, :, None, None, None], xd.shape) / npos,)

    else:
        mu = xd.mean(axis=axes, keepdims=True)
        out = ((xd - mu) ** 2).mean(axis=axes)

        def backward(g):
            return (g[:, :, None, None, None] * 2.0 * (xd - mu) / npos,)

    return apply_op(f"reduce_spatial_{kind}", (x,), out, backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        s = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - s),)

    return apply_op("softmax", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    xd = x.data
    return apply_op(
        "sum_all", (x,), np.asarray(xd.sum(), dtype=xd.dtype),
        lambda g: (np.broadcast_to(np.asarray(g), xd.shape).astype(xd.dtype),),
    )


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    n = xd.size
    return apply_op(
        "mean_all", (x,), np.asarray(xd.mean(), dtype=xd.dtype),
        lambda g: (np.broadcast_to(np.asarray(g) / n, xd.shape).astype(xd.dtype),),
    )


def adapt_modalities(x: Tensor, expected: int) -> Tensor:
    """Zero-fill missing modality channels and append presence indicators.

    (B, n_mod, spatial) becomes (B, 2*expected, spatial): the first ``expected``
    channels carry the data (missing ones zero), the rest are constant 0/1
    presence flags, letting domains with different modality counts share a stem.
    """
    if x.data.ndim != 5:
        raise ConfigurationError("adapt_modalities expects a 5-axis tensor")
    n_mod = x.shape[1]
    if n_mod < 1 or n_mod > expected:
        raise ConfigurationError(
            f"sample has {n_mod} modalities, backbone expects at most {expected}"
        )
    xd = x.data
    b = xd.shape[0]
    sp = xd.shape[2:]
    out = np.zeros((b, 2 * expected) + sp, dtype=xd.dtype)
    out[:, :n_mod] = xd
    out[:, expected : expected + n_mod] = 1.0

    def backward(g):
        return (np.ascontiguousarray(g[:, :n_mod]),)

    return apply_op("adapt_modalities", (x,), out, backward)
