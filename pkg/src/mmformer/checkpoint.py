"""Binary checkpoint container.

Layout (little-endian)::

    8 bytes   magic b"MMFCKPT\\0"
    u32       format version
    u32       header length, then UTF-8 JSON header (configs, config hash,
              optimizer counters, rng state, free-form metadata)
    u32       record count, then per record:
                u16 name length, name bytes, u8 rank, u32 x rank extents,
                float32 payload
    u32       CRC-32 of every preceding byte

Record names are ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
The file is parsed completely before anything is returned, so a truncated
or corrupted file never yields partial state.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig, TrainConfig, config_hash, config_to_dict, model_config_from_dict, train_config_from_dict
from .network import ModelParams

MAGIC = b"MMFCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    """First/second moment buffers and step counters.

    ``t`` counts optimizer steps; ``steps`` counts the updates each
    parameter actually received (parameters without a gradient are skipped).
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    steps: dict[str, int] = field(default_factory=dict)


@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    train_config: Optional[TrainConfig] = None
    adam: Optional[AdamState] = None
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)


def _records(ckpt: Checkpoint):
    for name, t in ckpt.params.items():
        yield f"param/{name}", t.data
    if ckpt.adam is not None:
        for name, arr in ckpt.adam.m.items():
            yield f"adam.m/{name}", arr
        for name, arr in ckpt.adam.v.items():
            yield f"adam.v/{name}", arr


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "model_config": config_to_dict(ckpt.model_config),
        "config_hash": config_hash(ckpt.model_config),
        "train_config": None if ckpt.train_config is None else config_to_dict(ckpt.train_config),
        "adam": None if ckpt.adam is None else {"t": ckpt.adam.t, "steps": ckpt.adam.steps},
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    records = list(_records(ckpt))
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically via a sibling temporary file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes, expected: Optional[ModelConfig] = None) -> Checkpoint:
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint is truncated or corrupted (checksum mismatch)")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    cfg = model_config_from_dict(header["model_config"])
    if config_hash(cfg) != header["config_hash"]:
        raise CheckpointError("stored config hash does not match the stored config")
    if expected is not None and config_hash(expected) != header["config_hash"]:
        raise CheckpointError(
            f"checkpoint config hash {header['config_hash']} differs from the requested model config {config_hash(expected)}"
        )
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last record")

    params = ModelParams.from_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    adam = None
    if header["adam"] is not None:
        adam = AdamState(
            m={k[7:]: v for k, v in arrays.items() if k.startswith("adam.m/")},
            v={k[7:]: v for k, v in arrays.items() if k.startswith("adam.v/")},
            t=int(header["adam"]["t"]),
            steps={k: int(v) for k, v in header["adam"]["steps"].items()},
        )
    tcfg = None if header["train_config"] is None else train_config_from_dict(header["train_config"])
    return Checkpoint(params, cfg, tcfg, adam, header["rng_state"], header["meta"])


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected)
