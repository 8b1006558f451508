"""Dense tensor value type, the reverse-mode gradient tape, and binary tensor I/O.

Tensors are immutable values wrapping a numpy array in float32 or float64.
Differentiable operations (see ops.py) are pure functions; when a GradTape is
active they append an entry holding a backward closure, and replaying the
entries in reverse accumulates vector-Jacobian products into ``.grad`` of every
participating tensor. A tape is confined to a single training step on a single
thread.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional real-valued array with optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ConfigurationError(
                f"mixed tensor dtypes {dt} vs {t.data.dtype}; cast explicitly"
            )
    return dt


def check_finite(t: Tensor, what: str) -> None:
    if not np.isfinite(t.data).all():
        raise InputError(f"non-finite values in {what}")


class TapeEntry:
    __slots__ = ("inputs", "outputs", "backward", "name")

    def __init__(self, inputs, outputs, backward, name):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward
        self.name = name


_ACTIVE = threading.local()


def _tape_stack() -> list:
    if not hasattr(_ACTIVE, "stack"):
        _ACTIVE.stack = []
    return _ACTIVE.stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of executed operations with their backward closures."""

    def __init__(self):
        self._entries: list[TapeEntry] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def watch(self, t: Tensor) -> None:
        self._tracked.add(id(t))

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(
        self,
        inputs: Sequence[Tensor],
        outputs: Sequence[Tensor],
        backward: Callable,
        name: str = "",
    ) -> None:
        self._entries.append(TapeEntry(tuple(inputs), tuple(outputs), backward, name))
        for out in outputs:
            self._tracked.add(id(out))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``output`` into ``.grad`` of all upstream tensors.

        ``seed`` defaults to ones, i.e. the gradient of ``output.sum()``.
        """
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            seed = np.ones_like(output.data)
        grads[id(output)] = np.asarray(seed, dtype=output.data.dtype)
        for entry in reversed(self._entries):
            out_grads = [grads.get(id(o)) for o in entry.outputs]
            if all(g is None for g in out_grads):
                continue
            in_grads = entry.backward(*out_grads)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for t, g in zip(entry.inputs, in_grads):
                if g is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        assigned: set[int] = set()
        for entry in self._entries:
            for t in entry.inputs:
                if t.requires_grad and id(t) not in assigned and id(t) in grads:
                    assigned.add(id(t))
                    g = grads[id(t)]
                    t.grad = g if t.grad is None else t.grad + g
        if output.requires_grad and id(output) in grads and id(output) not in assigned:
            output.grad = grads[id(output)]


def apply_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data,
    backward: Callable,
) -> Tensor | tuple[Tensor, ...]:
    """Wrap forward results into tensors and record the op on the active tape.

    ``out_data`` is one array or a tuple of arrays; ``backward`` receives one
    upstream gradient per output (``None`` for unused outputs) and returns one
    gradient (or ``None``) per input, in order.
    """
    multi = isinstance(out_data, tuple)
    outs = tuple(Tensor(d) for d in out_data) if multi else (Tensor(out_data),)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(inputs, outs, backward, name=name)
    return outs if multi else outs[0]


# ---------------------------------------------------------------------------
# Binary tensor blobs: magic, dtype byte, rank byte, u64-LE extents, raw LE data.

TENSOR_MAGIC = b"UHTEN1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_array(f, arr: np.ndarray, magic: bytes = TENSOR_MAGIC) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ConfigurationError(f"unsupported dtype {arr.dtype} for serialization")
    f.write(magic)
    f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array(f, magic: bytes = TENSOR_MAGIC) -> np.ndarray:
    got = f.read(len(magic))
    if got != magic:
        raise ConfigurationError(f"bad magic {got!r}, expected {magic!r}")
    code, rank = struct.unpack("<BB", f.read(2))
    if code not in _CODE_DTYPES:
        raise ConfigurationError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    dtype = _CODE_DTYPES[code]
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype, count=n)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_array(f, arr, TENSOR_MAGIC)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_array(f, TENSOR_MAGIC)
