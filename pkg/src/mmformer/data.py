"""Synthetic multimodal tumor phantoms, augmentation and raw volume files.

Volume file layout (all integers little-endian)::

    16 bytes  magic  b"MMFVOL01" padded with NUL bytes
    u8        dtype tag (0 = float32 image, 1 = uint8 labels)
    u8        rank
    u32 x rank extents
    payload   row-major values
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from .config import PhantomConfig
from .modality import MODALITIES

VOLUME_MAGIC = b"MMFVOL01".ljust(16, b"\0")
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_MAX_RANK = 8
_MAX_ELEMENTS = 2 ** 34


class VolumeFormatError(ValueError):
    pass


@dataclass
class Sample:
    """Four co-registered modality volumes and an integer label volume."""

    volumes: np.ndarray  # [4, D, H, W] float32, canonical modality order
    labels: np.ndarray  # [D, H, W] uint8 codes 0..3
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.volumes.ndim != 4 or self.volumes.shape[0] != len(MODALITIES):
            raise ValueError(f"volumes must be [4, D, H, W], got {self.volumes.shape}")
        if self.volumes.shape[1:] != self.labels.shape:
            raise ValueError("label and modality extents differ")

    @property
    def extent(self) -> tuple[int, int, int]:
        return self.labels.shape

    def modality(self, m) -> np.ndarray:
        return self.volumes[int(m)]


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, dtype=np.uint64)[0])


def _texture(rng: np.random.Generator, extent: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((extent,) * 3), sigma=sigma, mode="wrap")
    std = field_.std()
    return field_ / std if std > 0 else field_


def generate_phantom(seed: int, config: PhantomConfig = PhantomConfig()) -> Sample:
    """Render nested ellipsoid tumors over textured tissue.

    Each tumor is three concentric ellipsoids sharing a center and axis
    scaling (edema, non-enhancing core, enhancing), so region nesting holds
    by construction. Modality intensities come from ``config.contrast``.
    """
    rng = np.random.default_rng(seed)
    e = config.extent
    coords = np.indices((e, e, e), dtype=np.float64) + 0.5
    labels = np.zeros((e, e, e), dtype=np.uint8)
    n_tumors = int(rng.integers(config.tumor_count[0], config.tumor_count[1] + 1))
    for _ in range(n_tumors):
        radii = [rng.uniform(*r) * e for r in (config.wt_radius, config.tc_radius, config.et_radius)]
        axes = 1.0 + rng.uniform(-config.anisotropy, config.anisotropy, size=3)
        margin = np.minimum(radii[0] * axes, e / 2)
        center = rng.uniform(margin, e - margin)
        dist = np.sqrt(sum(((coords[i] - center[i]) / axes[i]) ** 2 for i in range(3)))
        for code, r in zip((1, 2, 3), radii):
            inside = dist <= r
            labels[inside] = np.maximum(labels[inside], code)
    texture = _texture(rng, e, config.texture_sigma) if config.texture_std > 0 else np.zeros((e,) * 3)
    contrast = np.asarray(config.contrast)
    vols = np.empty((len(MODALITIES), e, e, e), dtype=np.float32)
    for m in range(len(MODALITIES)):
        v = contrast[m][labels] + config.texture_std * texture
        if config.noise_std > 0:
            v = v + config.noise_std * rng.standard_normal(v.shape)
        vols[m] = v
    return Sample(vols, labels, seed=int(seed), meta={"tumors": n_tumors})


def flip(sample: Sample, axes: Sequence[int]) -> Sample:
    """Mirror spatial ``axes`` (0, 1, 2) of every volume and the labels."""
    axes = tuple(int(a) for a in axes)
    if not axes:
        return Sample(sample.volumes.copy(), sample.labels.copy(), sample.seed, dict(sample.meta))
    vols = np.flip(sample.volumes, axis=tuple(a + 1 for a in axes))
    labels = np.flip(sample.labels, axis=axes)
    return Sample(np.ascontiguousarray(vols), np.ascontiguousarray(labels), sample.seed, dict(sample.meta))


def augment(sample: Sample, seed: int, crop_extent: Optional[int] = None, shift: float = 0.1) -> Sample:
    """Random flip, crop and per-modality intensity shift.

    The geometric transform is shared by all volumes and the labels; the
    intensity shift, uniform in ``+/- shift`` times the modality's standard
    deviation, touches image volumes only.
    """
    extent = sample.extent
    crop = min(extent) if crop_extent is None else int(crop_extent)
    if crop > min(extent):
        raise ValueError(f"crop extent {crop} exceeds sample extent {extent}")
    if crop % 16:
        raise ValueError("crop extent must be divisible by 16")
    rng = np.random.default_rng(seed)
    axes = [a for a in range(3) if rng.random() < 0.5]
    out = flip(sample, axes)
    offsets = [int(rng.integers(0, n - crop + 1)) for n in extent]
    region = tuple(slice(o, o + crop) for o in offsets)
    vols = out.volumes[(slice(None),) + region].copy()
    labels = out.labels[region].copy()
    shifts = rng.uniform(-shift, shift, size=len(MODALITIES))
    for m in range(len(MODALITIES)):
        vols[m] += np.float32(shifts[m] * sample.volumes[m].std())
    meta = dict(sample.meta, flip=axes, crop=offsets, shift=shifts.tolist())
    return Sample(vols, labels, sample.seed, meta)


def normalize(sample: Sample) -> Sample:
    """Zero-mean, unit-variance intensities per modality."""
    vols = sample.volumes.astype(np.float64)
    mean = vols.mean(axis=(1, 2, 3), keepdims=True)
    std = vols.std(axis=(1, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    return Sample(((vols - mean) / std).astype(np.float32), sample.labels, sample.seed, dict(sample.meta))


class DatasetSplit(NamedTuple):
    train: list
    val: list


def make_dataset(n: int, seed: int, config: PhantomConfig = PhantomConfig()) -> DatasetSplit:
    """``n`` phantoms with per-index derived seeds, split 80/20 (train first)."""
    if n < 2:
        raise ValueError("need at least two samples for a train/val split")
    samples = [generate_phantom(derive_seed(seed, i), config) for i in range(n)]
    n_train = int(np.floor(0.8 * n))
    return DatasetSplit(samples[:n_train], samples[n_train:])


# -- volume files --------------------------------------------------------------

def save_volume(path, volume: np.ndarray) -> None:
    arr = np.asarray(volume)
    if arr.dtype == np.uint8 or (arr.dtype.kind in "iub" and arr.size and arr.min() >= 0 and arr.max() <= 255):
        tag, data = 1, arr.astype("u1")
    elif arr.dtype.kind == "f":
        tag, data = 0, arr.astype("<f4")
    else:
        raise VolumeFormatError(f"unsupported volume dtype {arr.dtype}")
    if not 1 <= data.ndim <= _MAX_RANK:
        raise VolumeFormatError(f"rank {data.ndim} outside 1..{_MAX_RANK}")
    header = VOLUME_MAGIC + struct.pack("<BB", tag, data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(data).tobytes())


def load_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 18 or raw[:16] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    tag, rank = struct.unpack_from("<BB", raw, 16)
    if tag not in _DTYPE_TAGS:
        raise VolumeFormatError(f"{path}: unknown dtype tag {tag}")
    if not 1 <= rank <= _MAX_RANK:
        raise VolumeFormatError(f"{path}: rank {rank} outside 1..{_MAX_RANK}")
    offset = 18 + 4 * rank
    if len(raw) < offset:
        raise VolumeFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 18)
    count = 1
    for n in shape:
        count *= n
        if n == 0 or count > _MAX_ELEMENTS:
            raise VolumeFormatError(f"{path}: extents {shape} out of range")
    dtype = _DTYPE_TAGS[tag]
    if len(raw) - offset != count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: payload holds {len(raw) - offset} bytes, extents {shape} need {count * dtype.itemsize}")
    arr = np.frombuffer(raw, dtype=dtype, offset=offset, count=count).reshape(shape)
    return arr.astype(np.float32 if tag == 0 else np.uint8)


def save_sample(directory, name: str, sample: Sample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        save_volume(d / f"{name}_{m.name}.vol", sample.modality(m))
    save_volume(d / f"{name}_label.vol", sample.labels)


def load_sample(directory, name: str) -> Sample:
    d = Path(directory)
    vols = np.stack([load_volume(d / f"{name}_{m.name}.vol") for m in MODALITIES])
    return Sample(vols, load_volume(d / f"{name}_label.vol"))
