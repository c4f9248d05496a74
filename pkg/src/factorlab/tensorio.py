"""Versioned tensor-record files shared by backbone and inversion checkpoints.

Byte layout (all integers little-endian):

    magic        4 bytes  b"FLTR"
    version      u32
    digest       32 bytes sha256 of the canonical JSON of meta["config"]
    meta_len     u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count        u32 number of tensor records
    record*      name_len u16 | name UTF-8 | dtype u8 (0 = f32) | ndim u8 |
                 ndim x u32 shape | prod(shape) x f32 raw data
    checksum     32 bytes sha256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FLTR"
VERSION = 1
_F32 = 0


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_digest(config) -> str:
    return hashlib.sha256(canonical_json(config)).hexdigest()


@dataclass
class TensorState:
    meta: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.meta.get("config", {}))


def to_bytes(state: TensorState) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += bytes.fromhex(state.digest)
    meta = canonical_json(state.meta)
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(state.tensors))
    for name in sorted(state.tensors):
        arr = state.tensors[name].detach().cpu().contiguous().to(torch.float32).numpy()
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", _F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def from_bytes(data: bytes) -> TensorState:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptCheckpointError("file truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CorruptCheckpointError("bad magic; not a tensor-record file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {VERSION}")
    digest = bytes(take(32)).hex()
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        dtype, ndim = struct.unpack("<BB", take(2))
        if dtype != _F32:
            raise CorruptCheckpointError(f"record {name}: unknown dtype code {dtype}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    body_end = pos
    checksum = bytes(take(32))
    if pos != len(view):
        raise CorruptCheckpointError("trailing bytes after checksum")
    if hashlib.sha256(view[:body_end]).digest() != checksum:
        raise CorruptCheckpointError("checksum mismatch; file damaged")
    state = TensorState(meta, tensors)
    if state.digest != digest:
        raise DigestMismatchError("stored config digest does not match the header config")
    return state


def save_state(path: str | Path, state: TensorState) -> str:
    """Write ``state``; returns the sha256 of the written file."""
    data = to_bytes(state)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_state(path: str | Path) -> TensorState:
    return from_bytes(Path(path).read_bytes())


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    own = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(own, strict=True)
