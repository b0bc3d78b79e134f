"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SPZM" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
    | payload: float32 tensors back to back | u32 CRC-32 of payload

The metadata holds the model kind, architecture, training seed/epochs and a
tensor directory of ``{name, shape, offset}`` with byte offsets into the
payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedCheckpointError",
    "ChecksumError",
    "save_checkpoint",
    "load_checkpoint",
    "dumps",
    "loads",
]

MAGIC = b"SPZM"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class UnsupportedVersionError(CheckpointError):
    code = "unsupported-version"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


class ChecksumError(CheckpointError):
    code = "checksum"


@dataclass
class Checkpoint:
    model_kind: str  # "source" | "target"
    architecture: dict
    tensors: dict[str, np.ndarray]
    seed: int = 0
    epochs: int = 0
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.model_kind not in ("source", "target"):
            raise ValueError(f"model_kind must be 'source' or 'target', got {self.model_kind!r}")
        self.tensors = {
            k: np.ascontiguousarray(np.asarray(v, dtype="<f4")) for k, v in self.tensors.items()
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return dumps(self) == dumps(other)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}


def dumps(ckpt: Checkpoint) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    meta = {
        "model_kind": ckpt.model_kind,
        "architecture": ckpt.architecture,
        "seed": int(ckpt.seed),
        "epochs": int(ckpt.epochs),
        "extra": ckpt.extra,
        "tensors": directory,
        "payload_bytes": len(payload),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", ckpt.version),
            struct.pack("<Q", len(meta_bytes)),
            meta_bytes,
            payload,
            struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF),
        ]
    )


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {blob[:4]!r} != {MAGIC!r}")
    if len(blob) < 16:
        raise TruncatedCheckpointError("header truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > FORMAT_VERSION or version < 1:
        raise UnsupportedVersionError(
            f"checkpoint version {version} unsupported (max supported {FORMAT_VERSION})"
        )
    (meta_len,) = struct.unpack_from("<Q", blob, 8)
    start = 16 + meta_len
    if len(blob) < start:
        raise TruncatedCheckpointError("metadata truncated")
    try:
        meta = json.loads(blob[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from exc
    n_payload = int(meta["payload_bytes"])
    end = start + n_payload
    if len(blob) < end + 4:
        raise TruncatedCheckpointError(
            f"payload truncated: need {end + 4} bytes, file has {len(blob)}"
        )
    payload = blob[start:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("payload CRC-32 mismatch")
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = int(entry["offset"])
        if entry["name"] in tensors:
            raise CheckpointError(f"duplicate tensor name {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        )
    return Checkpoint(
        model_kind=meta["model_kind"],
        architecture=meta["architecture"],
        tensors=tensors,
        seed=meta["seed"],
        epochs=meta["epochs"],
        extra=meta.get("extra", {}),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
