"""Synthetic heterogeneous institutions: volumes, labelmaps, manifests.

Each domain is described by a DomainSpec with controllable intensity
statistics, modality count, label set, and lesion geometry. A generated
sample is a background Gaussian field per modality with ellipsoidal lesions
rendered at class-specific intensity offsets; the labelmap stores domain-local
class indices (0 = background). Everything is deterministic under
(seed, sample index): regenerating from the same spec reproduces identical
bytes.

Voxel model for modality m:

    value = intensity_mean[m] + offset[class, m] * intensity_std[m]   (in lesions)
          + noise_std * intensity_std[m] * N(0, 1)                    (everywhere)

so intensity_mean/intensity_std are the domain-shift knobs and noise_std = 0
with zero lesions yields an exactly constant volume.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .tensor import read_array, write_array

VOLUME_MAGIC = b"UHVOL1"
LABEL_MAGIC = b"UHLAB1"
SPLIT_FRACTIONS = {"val": 0.1, "test": 0.2}  # train takes the remainder


def save_volume(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_array(f, np.asarray(arr, dtype=np.float32), VOLUME_MAGIC)


def load_volume(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_array(f, VOLUME_MAGIC)


def save_labelmap(path, arr: np.ndarray) -> None:
    # labelmaps are small integer fields; stored as float32 in the same container
    with open(path, "wb") as f:
        write_array(f, np.asarray(arr, dtype=np.float32), LABEL_MAGIC)


def load_labelmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_array(f, LABEL_MAGIC).astype(np.int64)


def _as_ranges(value, n_classes, what):
    """Normalize a single (lo, hi) or a per-class list of them."""
    v = list(value)
    if len(v) == 2 and not isinstance(v[0], (list, tuple)):
        return [tuple(v)] * n_classes
    if len(v) != n_classes:
        raise ConfigurationError(f"{what} must have one range per class, got {value!r}")
    return [tuple(r) for r in v]


@dataclass
class DomainSpec:
    name: str
    label_set: list[str]
    n_modalities: int = 1
    intensity_mean: list[float] = field(default_factory=lambda: [0.0])
    intensity_std: list[float] = field(default_factory=lambda: [1.0])
    noise_std: float = 1.0
    lesion_count_range: tuple | list = (1, 4)
    lesion_radius_range: tuple | list = (3.0, 6.0)
    volume_shape: tuple | list = (32, 32, 32)
    seed: int = 0
    class_offsets: list | None = None  # per class, per modality; drawn from seed if omitted

    def __post_init__(self):
        if not self.label_set:
            raise ConfigurationError("label_set must contain at least one class")
        if self.n_modalities < 1:
            raise ConfigurationError("n_modalities must be >= 1")
        for attr in ("intensity_mean", "intensity_std"):
            vals = list(getattr(self, attr))
            if len(vals) == 1:
                vals = vals * self.n_modalities
            if len(vals) != self.n_modalities:
                raise ConfigurationError(f"{attr} must have one value per modality")
            setattr(self, attr, vals)
        if any(s <= 0 for s in self.intensity_std):
            raise ConfigurationError("intensity_std must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        if len(self.volume_shape) != 3:
            raise ConfigurationError("volume_shape must have three extents")
        self.lesion_count_range = _as_ranges(self.lesion_count_range, len(self.label_set),
                                             "lesion_count_range")
        self.lesion_radius_range = _as_ranges(self.lesion_radius_range, len(self.label_set),
                                              "lesion_radius_range")
        max_r = max(hi for _, hi in self.lesion_radius_range)
        if max_r > (min(self.volume_shape) - 1) / 2:
            raise ConfigurationError(
                f"lesion radius {max_r} exceeds half the smallest extent "
                f"({(min(self.volume_shape) - 1) / 2}); lesions must fit inside the volume"
            )
        if self.class_offsets is None:
            rng = np.random.default_rng([int(self.seed), 0x0FF5E7])
            self.class_offsets = [
                [float(rng.uniform(1.5, 3.0)) for _ in range(self.n_modalities)]
                for _ in self.label_set
            ]
        else:
            self.class_offsets = [[float(v) for v in row] for row in self.class_offsets]
            if len(self.class_offsets) != len(self.label_set) or any(
                len(row) != self.n_modalities for row in self.class_offsets
            ):
                raise ConfigurationError("class_offsets must be n_classes x n_modalities")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "label_set": list(self.label_set),
            "n_modalities": self.n_modalities,
            "intensity_mean": self.intensity_mean,
            "intensity_std": self.intensity_std,
            "noise_std": self.noise_std,
            "lesion_count_range": [list(r) for r in self.lesion_count_range],
            "lesion_radius_range": [list(r) for r in self.lesion_radius_range],
            "volume_shape": list(self.volume_shape),
            "seed": int(self.seed),
            "class_offsets": self.class_offsets,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DomainSpec":
        return cls(**doc)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _ellipsoid_mask(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_sample(spec: DomainSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (volume, labelmap) pair, deterministic under (spec.seed, index)."""
    rng = np.random.default_rng([int(spec.seed), 0x5A3B1E, int(index)])
    shape = spec.volume_shape
    base = np.zeros((spec.n_modalities,) + shape, dtype=np.float64)
    for m in range(spec.n_modalities):
        base[m] = spec.intensity_mean[m]
    labelmap = np.zeros(shape, dtype=np.int64)
    for ci, _cls in enumerate(spec.label_set):
        lo, hi = spec.lesion_count_range[ci]
        count = int(rng.integers(int(lo), int(hi) + 1))
        rlo, rhi = spec.lesion_radius_range[ci]
        for _ in range(count):
            radii = rng.uniform(rlo, rhi, size=3)
            center = [rng.uniform(r, n - 1 - r) for r, n in zip(radii, shape)]
            mask = _ellipsoid_mask(shape, center, radii)
            labelmap[mask] = ci + 1
            for m in range(spec.n_modalities):
                level = spec.intensity_mean[m] + spec.class_offsets[ci][m] * spec.intensity_std[m]
                base[m][mask] = level
    if spec.noise_std > 0:
        noise = rng.standard_normal(base.shape)
        for m in range(spec.n_modalities):
            base[m] += spec.noise_std * spec.intensity_std[m] * noise[m]
    return base.astype(np.float32), labelmap


@dataclass
class DatasetManifest:
    spec: DomainSpec
    root: Path
    splits: dict[str, list[dict]]  # split -> [{"volume": ..., "labelmap": ...}]
    spec_hash: str

    def samples(self, split: str) -> list[dict]:
        if split not in self.splits:
            raise ConfigurationError(f"unknown split {split!r}")
        return self.splits[split]

    def load(self, entry: dict) -> tuple[np.ndarray, np.ndarray]:
        return (
            load_volume(self.root / entry["volume"]),
            load_labelmap(self.root / entry["labelmap"]),
        )

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "spec_hash": self.spec_hash,
            "splits": self.splits,
        }

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        spec = DomainSpec.from_dict(doc["spec"])
        return cls(spec=spec, root=path.parent, splits=doc["splits"],
                   spec_hash=doc["spec_hash"])


def split_counts(n: int) -> dict[str, int]:
    """70/10/20 split; floors for val and test, train takes the remainders."""
    n_val = int(np.floor(SPLIT_FRACTIONS["val"] * n))
    n_test = int(np.floor(SPLIT_FRACTIONS["test"] * n))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def generate_domain(spec: DomainSpec, n_samples: int, out_dir) -> DatasetManifest:
    """Write n_samples volume/labelmap blob pairs plus a manifest JSON."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    out_dir = Path(out_dir)
    ddir = out_dir / spec.name
    ddir.mkdir(parents=True, exist_ok=True)
    counts = split_counts(n_samples)
    order = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
    splits: dict[str, list[dict]] = {"train": [], "val": [], "test": []}
    for idx in range(n_samples):
        vol, lab = generate_sample(spec, idx)
        vpath = ddir / f"{spec.name}_{idx:05d}_vol.uhvol"
        lpath = ddir / f"{spec.name}_{idx:05d}_lab.uhlab"
        save_volume(vpath, vol)
        save_labelmap(lpath, lab)
        splits[order[idx]].append(
            {"volume": str(vpath.relative_to(out_dir)), "labelmap": str(lpath.relative_to(out_dir))}
        )
    manifest = DatasetManifest(spec=spec, root=out_dir, splits=splits,
                               spec_hash=spec.spec_hash())
    manifest.save(out_dir / f"{spec.name}_manifest.json")
    return manifest


def augment(volume: np.ndarray, labelmap: np.ndarray,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Flips, one axis-aligned 90-degree rotation, and an intensity transform.

    Geometric transforms apply to both the volume (modalities, spatial) and
    the labelmap (spatial); the intensity scale/shift touches the volume only.
    """
    if volume.shape[1:] != labelmap.shape:
        raise ConfigurationError(
            f"volume spatial {volume.shape[1:]} != labelmap {labelmap.shape}"
        )
    vol, lab = volume, labelmap
    for ax in range(3):
        if rng.random() < 0.5:
            vol = np.flip(vol, axis=1 + ax)
            lab = np.flip(lab, axis=ax)
    plane = int(rng.integers(0, 3))  # (h,w), (h,d), (w,d)
    k = int(rng.integers(0, 4))
    pairs = [(1, 2), (1, 3), (2, 3)]
    ph, pw = pairs[plane]
    vol = np.rot90(vol, k=k, axes=(ph, pw))
    lab = np.rot90(lab, k=k, axes=(ph - 1, pw - 1))
    a = rng.uniform(0.9, 1.1)
    b = rng.uniform(-0.1, 0.1)
    vol = (a * vol + b).astype(volume.dtype)
    return np.ascontiguousarray(vol), np.ascontiguousarray(lab)


def crop_patch(volume: np.ndarray, labelmap: np.ndarray, patch_extent: int,
               rng: np.random.Generator, fg_bias: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Aligned random crop; with probability fg_bias the crop covers a lesion voxel."""
    sp = volume.shape[1:]
    if any(patch_extent > n for n in sp):
        raise ConfigurationError(f"patch extent {patch_extent} exceeds volume {sp}")
    fg = np.argwhere(labelmap > 0)
    if fg_bias > 0 and len(fg) > 0 and rng.random() < fg_bias:
        voxel = fg[int(rng.integers(0, len(fg)))]
        corner = [
            int(rng.integers(max(0, v - patch_extent + 1), min(v, n - patch_extent) + 1))
            for v, n in zip(voxel, sp)
        ]
    else:
        corner = [int(rng.integers(0, n - patch_extent + 1)) for n in sp]
    sl = tuple(slice(c, c + patch_extent) for c in corner)
    return (
        np.ascontiguousarray(volume[(slice(None),) + sl]),
        np.ascontiguousarray(labelmap[sl]),
    )
