"""Versioned binary checkpoints.

Layout (little-endian)::

    b"HMCK"  u32 version  u32 meta_len  meta_len bytes of UTF-8 JSON
    u32 n_records
    per record: u32 name_len, name (UTF-8), u8 tag (0 internal, 1 external),
                u32 rank, rank x u32 dims, float64 payload (row-major)

Records are written in sorted name order so equal parameters give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from ..autodiff import Tensor
from ..nn import EXTERNAL, INTERNAL, ParamSet

MAGIC = b"HMCK"
VERSION = 1
_TAGS = {INTERNAL: 0, EXTERNAL: 1}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def encode_checkpoint(params: ParamSet, meta: dict[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    names = sorted(params.names())
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(names))]
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BI", _TAGS[params.tags[name]], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.name}: truncated at byte {self.pos} (needed {n} more)")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes, name: str = "<bytes>") -> tuple[ParamSet, dict]:
    r = _Reader(raw, name)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{name}: not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{name}: corrupt metadata: {e}") from None
    (count,) = r.unpack("<I")
    tensors, tags = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        pname = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _TAG_NAMES:
            raise CheckpointError(f"{name}: record {pname!r} has unknown tag {tag}")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[pname] = Tensor(arr)
        tags[pname] = _TAG_NAMES[tag]
    if r.pos != len(raw):
        raise CheckpointError(f"{name}: {len(raw) - r.pos} trailing bytes")
    return ParamSet(tensors, tags), meta


def save_checkpoint(path: str | Path, params: ParamSet, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, meta))
    return path


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return decode_checkpoint(raw, path.name)
