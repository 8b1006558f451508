"""Raw 3D cross-correlation kernels with interchangeable compute backends.

The differentiable conv3d op in ops.py delegates its heavy lifting to the
three functions here. Two backends exist: a pure-numpy im2col implementation
(the reference, always available) and an optional torch backend that is much
faster on CPU for float32. Backend choice never changes semantics; both are
checked against a naive nested-loop oracle and finite differences in the test
suite. float64 always uses numpy, so verification runs are backend-independent.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import torch

    torch.set_num_threads(max(1, os.cpu_count() or 1))
    _HAVE_TORCH = True
except Exception:  # pragma: no cover - torch is optional
    torch = None
    _HAVE_TORCH = False

# "auto" uses torch for float32 when available, numpy otherwise.
_BACKEND = os.environ.get("UHARMONY_CONV_BACKEND", "auto")


def set_conv_backend(name: str) -> None:
    global _BACKEND
    if name not in ("auto", "numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and not _HAVE_TORCH:
        raise ValueError("torch backend requested but torch is not importable")
    _BACKEND = name


def get_conv_backend() -> str:
    return _BACKEND


def _use_torch(dtype) -> bool:
    if _BACKEND == "numpy":
        return False
    if _BACKEND == "torch":
        return True
    return _HAVE_TORCH and np.dtype(dtype) == np.dtype(np.float32)


def out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# -- numpy reference ---------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, out_sp: tuple[int, int, int]) -> np.ndarray:
    """View of all k^3 patches, laid out (B, Ho, Wo, Do, Cin, k, k, k)."""
    b, c = xp.shape[:2]
    ho, wo, do = out_sp
    sb, sc, sh, sw, sd = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (b, ho, wo, do, c, k, k, k),
        (sb, sh * stride, sw * stride, sd * stride, sc, sh, sw, sd),
        writeable=False,
    )


def _conv3d_np(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> np.ndarray:
    b, ci = x.shape[:2]
    co, _, ks = k.shape[:3]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    out_sp = tuple(out_extent(n, ks, stride, 0) for n in xp.shape[2:])
    cols = _im2col(xp, ks, stride, out_sp).reshape(b * np.prod(out_sp), ci * ks**3)
    out = cols @ k.reshape(co, -1).T
    return np.ascontiguousarray(
        out.reshape(b, *out_sp, co).transpose(0, 4, 1, 2, 3)
    )


def _conv3d_grad_kernel_np(g, x, k_shape, stride, padding):
    co, ci, ks = k_shape[:3]
    b = x.shape[0]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    out_sp = g.shape[2:]
    cols = _im2col(xp, ks, stride, out_sp)  # (B,Ho,Wo,Do,Ci,k,k,k)
    gk = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
    return gk  # (Co, Ci, k, k, k)


def _dilate_and_pad(g: np.ndarray, stride: int, pad_lo: int, pad_hi: tuple[int, int, int]) -> np.ndarray:
    b, c = g.shape[:2]
    sp = g.shape[2:]
    if stride > 1:
        dil = np.zeros(
            (b, c) + tuple((n - 1) * stride + 1 for n in sp), dtype=g.dtype
        )
        dil[:, :, ::stride, ::stride, ::stride] = g
        g = dil
    pads = ((0, 0), (0, 0)) + tuple((pad_lo, pad_lo + e) for e in pad_hi)
    return np.pad(g, pads)


def _conv3d_grad_input_np(g, k, x_shape, stride, padding):
    ks = k.shape[2]
    # extra right padding covers the remainder a strided forward pass dropped
    extras = tuple((n + 2 * padding - ks) % stride for n in x_shape[2:])
    gp = _dilate_and_pad(g, stride, ks - 1 - padding, extras)
    k_flip = k[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    gx = _conv3d_np(gp, np.ascontiguousarray(k_flip), 1, 0)
    return gx[:, :, : x_shape[2], : x_shape[3], : x_shape[4]]


# -- torch backend -----------------------------------------------------------


def _conv3d_torch(x, k, stride, padding):
    with torch.no_grad():
        out = torch.nn.functional.conv3d(
            torch.from_numpy(np.ascontiguousarray(x)),
            torch.from_numpy(np.ascontiguousarray(k)),
            stride=stride,
            padding=padding,
        )
    return out.numpy()


def _conv3d_grad_input_torch(g, k, x_shape, stride, padding):
    with torch.no_grad():
        gx = torch.nn.grad.conv3d_input(
            list(x_shape),
            torch.from_numpy(np.ascontiguousarray(k)),
            torch.from_numpy(np.ascontiguousarray(g)),
            stride=stride,
            padding=padding,
        )
    return gx.numpy()


def _conv3d_grad_kernel_torch(g, x, k_shape, stride, padding):
    with torch.no_grad():
        gk = torch.nn.grad.conv3d_weight(
            torch.from_numpy(np.ascontiguousarray(x)),
            list(k_shape),
            torch.from_numpy(np.ascontiguousarray(g)),
            stride=stride,
            padding=padding,
        )
    return gk.numpy()


# -- public kernel surface ---------------------------------------------------


def conv3d_forward(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> np.ndarray:
    if _use_torch(x.dtype):
        return _conv3d_torch(x, k, stride, padding)
    return _conv3d_np(x, k, stride, padding)


def conv3d_grad_input(g, k, x_shape, stride, padding) -> np.ndarray:
    if _use_torch(g.dtype):
        return _conv3d_grad_input_torch(g, k, x_shape, stride, padding)
    return _conv3d_grad_input_np(g, k, x_shape, stride, padding)


def conv3d_grad_kernel(g, x, k_shape, stride, padding) -> np.ndarray:
    if _use_torch(g.dtype):
        return _conv3d_grad_kernel_torch(g, x, k_shape, stride, padding)
    return _conv3d_grad_kernel_np(g, x, k_shape, stride, padding)
