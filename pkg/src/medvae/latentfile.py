"""Self-describing latent files (MVL).

Layout, little-endian::

    b"MVL1"          magic
    u8   ndim        spatial rank (2 or 3)
    u32  f           downsizing factor of the producing model
    u32  C           latent channels
    u32 x (ndim+1)   extents: spatial..., C
    f32 x prod(ext)  payload, row-major over (spatial..., C)

Arrays in memory are channels-first ``(C, *spatial)``; the file stores them
channels-last.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MVL1"


class LatentFormatError(ValueError):
    """Corrupt or inconsistent latent file."""


@dataclass(frozen=True)
class LatentMeta:
    ndim: int
    f: int
    channels: int

    @property
    def per_axis(self) -> int:
        return round(self.f ** (1.0 / self.ndim))


def header_size(ndim: int) -> int:
    return 4 + 1 + 4 + 4 + 4 * (ndim + 1)


def encode_latent(latent: np.ndarray, f: int) -> bytes:
    latent = np.asarray(latent)
    if latent.ndim not in (3, 4):
        raise ValueError(f"latent must be (C, H, W) or (C, H, W, D), got {latent.shape}")
    if f < 1:
        raise ValueError("f must be >= 1")
    nd = latent.ndim - 1
    c = latent.shape[0]
    ext = latent.shape[1:] + (c,)
    head = MAGIC + struct.pack("<BII", nd, f, c) + struct.pack(f"<{nd + 1}I", *ext)
    payload = np.ascontiguousarray(np.moveaxis(latent, 0, -1), dtype="<f4").tobytes()
    return head + payload


def decode_latent(buf: bytes) -> tuple[np.ndarray, LatentMeta]:
    if buf[:4] != MAGIC:
        raise LatentFormatError("bad magic; not an MVL latent file")
    if len(buf) < 13:
        raise LatentFormatError("truncated header")
    nd, f, c = struct.unpack_from("<BII", buf, 4)
    if nd not in (2, 3):
        raise LatentFormatError(f"unsupported spatial rank {nd}")
    hs = header_size(nd)
    if len(buf) < hs:
        raise LatentFormatError("truncated header")
    ext = struct.unpack_from(f"<{nd + 1}I", buf, 13)
    if ext[-1] != c:
        raise LatentFormatError(f"channel extent {ext[-1]} disagrees with C={c}")
    expected = math.prod(ext) * 4
    if len(buf) - hs != expected:
        raise LatentFormatError(f"payload is {len(buf) - hs} bytes, header implies {expected}")
    arr = np.frombuffer(buf, dtype="<f4", offset=hs).reshape(ext)
    return np.moveaxis(arr, -1, 0).astype(np.float32), LatentMeta(nd, f, c)


def write_latent(path: str | os.PathLike, latent: np.ndarray, f: int) -> None:
    Path(path).write_bytes(encode_latent(latent, f))


def read_latent(path: str | os.PathLike) -> tuple[np.ndarray, LatentMeta]:
    return decode_latent(Path(path).read_bytes())


def payload_bytes(path_or_buf) -> int:
    buf = path_or_buf if isinstance(path_or_buf, (bytes, bytearray)) else Path(path_or_buf).read_bytes()
    _, meta = decode_latent(bytes(buf))
    return len(buf) - header_size(meta.ndim)


def storage_ratio(source_dims, latent_file) -> float:
    """float32 bytes of a single-channel source over the latent payload bytes."""
    return math.prod(source_dims) * 4 / payload_bytes(latent_file)
