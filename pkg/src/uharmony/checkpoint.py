"""Versioned binary checkpoints: parameters, optimizer moments, prototypes.

Layout: magic "UHCKPT1", u32 header length, JSON header (epoch, config hash,
configs, registry, ordered array directory), then the raw little-endian array
payload. Save/load round-trips are bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

MAGIC = b"UHCKPT1"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def config_hash(train_config: dict, backbone_config: dict, registry_doc: dict) -> str:
    blob = json.dumps(
        {"train": train_config, "backbone": backbone_config, "registry": registry_doc},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    epoch: int
    train_config: dict
    backbone_config: dict
    registry_doc: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.train_config, self.backbone_config, self.registry_doc)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    directory = []
    payload = []
    for key in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[key])
        if arr.dtype == np.float32:
            code = "f4"
        elif arr.dtype == np.float64:
            code = "f8"
        elif arr.dtype == np.int64:
            code = "i8"
        else:
            raise ConfigurationError(f"unsupported checkpoint dtype {arr.dtype} for {key!r}")
        directory.append({"key": key, "shape": list(arr.shape), "dtype": code})
        payload.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    header = json.dumps(
        {
            "version": VERSION,
            "epoch": ckpt.epoch,
            "config_hash": ckpt.hash,
            "train_config": ckpt.train_config,
            "backbone_config": ckpt.backbone_config,
            "registry": ckpt.registry_doc,
            "arrays": directory,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in payload:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        if header.get("version") != VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {header.get('version')}")
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = _DTYPES[entry["dtype"]]
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(n * dtype.itemsize)
            arrays[entry["key"]] = (
                np.frombuffer(buf, dtype=dtype, count=n)
                .reshape(entry["shape"])
                .astype(dtype.newbyteorder("="))
            )
    ckpt = Checkpoint(
        epoch=int(header["epoch"]),
        train_config=header["train_config"],
        backbone_config=header["backbone_config"],
        registry_doc=header["registry"],
        arrays=arrays,
    )
    if ckpt.hash != header["config_hash"]:
        raise ConfigurationError("checkpoint config hash mismatch (corrupted header?)")
    return ckpt
