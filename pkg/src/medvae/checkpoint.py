"""Binary checkpoint container.

Layout (little-endian)::

    b"MVC1"
    config block: u8 ndim | u32 f | u32 C | u32 width | u32 stages | u32 groups
                  | u8 nonlinearity | u8 upsample
    u32 tensor count, then per tensor:
        u16 name length | name (utf-8) | u8 rank | u32 extents[rank] | f64 payload
    u32 metadata length | metadata (utf-8 JSON, sorted keys)

Any trailing byte, short read or bad magic raises :class:`CheckpointError`.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MVC1"
_CONFIG = struct.Struct("<BIIIIIBB")
_NONLIN = ("silu", "leaky_relu")
_UPSAMPLE = ("nearest", "transpose")


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint."""


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def encode(config_fields: dict, tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, _CONFIG.pack(
        config_fields["ndim"], config_fields["f"], config_fields["latent_channels"],
        config_fields["width"], config_fields["stages"], config_fields["groups"],
        _NONLIN.index(config_fields["nonlinearity"]), _UPSAMPLE.index(config_fields["upsample"]))]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    ndim, f, c, width, stages, groups, nl, up = r.unpack(_CONFIG.format)
    if nl >= len(_NONLIN) or up >= len(_UPSAMPLE):
        raise CheckpointError("unknown layer code in config block")
    config_fields = dict(ndim=ndim, f=f, latent_channels=c, width=width, stages=stages,
                         groups=groups, nonlinearity=_NONLIN[nl], upsample=_UPSAMPLE[up])
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = math.prod(shape)
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint metadata") from exc
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return config_fields, tensors, meta


def write(path: str | os.PathLike, config_fields: dict, tensors: dict, meta: dict) -> None:
    Path(path).write_bytes(encode(config_fields, tensors, meta))


def read(path: str | os.PathLike):
    return decode(Path(path).read_bytes())
