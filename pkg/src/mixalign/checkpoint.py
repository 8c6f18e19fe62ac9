"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"MIXALGN\\x00"
    version    u32
    meta_len   u64, then meta_len bytes of UTF-8 JSON (sorted keys)
    n_blobs    u32
    per blob:  u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims,
               prod(dims) x f8 values (C order)

The JSON holds scalar state: rng states, scheduler, counters, the config
hash and text. Writing is deterministic, so save -> load -> save yields
identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"MIXALGN\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(metadata: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, allow_nan=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if a.dtype.kind not in "fiub":
            raise CheckpointError(f"blob {name!r} is not numeric")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, metadata: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically: a crash mid-save leaves the previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(metadata, arrays))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<Q")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    (n_blobs,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_blobs):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after the last blob")
    return metadata, arrays
