"""Image/volume I/O, cropping, patching and the synthetic toy corpora.

Arrays are channels-first float64 in [0, 1]: 2D images are ``(B, H, W)`` and
volumes ``(B, H, W, S)``. Two on-disk formats are supported: binary PGM (P5,
8 or 16 bit) for 2D images and MVV for volumes::

    b"MVV1" | u8 ndim (=3) | u32 H | u32 W | u32 S | u32 B | f32[H*W*S*B]

all little-endian, payload row-major over ``(H, W, S, B)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .interp import resize_array

MVV_MAGIC = b"MVV1"
_MVV_HEADER = struct.Struct("<4sBIIII")

TOY_KINDS = ("blob2d", "ring2d", "sphere3d", "plane3d")


class FormatError(ValueError):
    """Malformed or truncated image/volume/manifest file."""


@dataclass(frozen=True)
class BoundingBox:
    offsets: tuple[int, ...]
    extents: tuple[int, ...]

    def __post_init__(self):
        if len(self.offsets) != len(self.extents):
            raise ValueError("offsets and extents must have the same rank")
        if any(o < 0 for o in self.offsets) or any(e < 1 for e in self.extents):
            raise ValueError(f"invalid box {self}")

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + e) for o, e in zip(self.offsets, self.extents))

    def fits(self, shape: Sequence[int]) -> bool:
        return len(shape) == len(self.offsets) and all(
            o + e <= n for o, e, n in zip(self.offsets, self.extents, shape))

    def to_text(self) -> str:
        # manifest order: r0,c0,h,w[,s0,d]
        parts = []
        if len(self.offsets) >= 2:
            parts += [self.offsets[0], self.offsets[1], self.extents[0], self.extents[1]]
        if len(self.offsets) == 3:
            parts += [self.offsets[2], self.extents[2]]
        return ",".join(str(int(p)) for p in parts)

    @classmethod
    def from_text(cls, text: str) -> BoundingBox:
        try:
            vals = [int(v) for v in text.split(",")]
        except ValueError as exc:
            raise FormatError(f"bad box {text!r}") from exc
        if len(vals) == 4:
            return cls((vals[0], vals[1]), (vals[2], vals[3]))
        if len(vals) == 6:
            return cls((vals[0], vals[1], vals[4]), (vals[2], vals[3], vals[5]))
        raise FormatError(f"box needs 4 or 6 integers, got {text!r}")


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates header and raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError("truncated PGM header")
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    tokens, start = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-integer PGM header field") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PGM header {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    payload = buf[start:start + need]
    if len(payload) != need:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {need} bytes")
    raw = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return (raw.astype(np.float64) / maxval)[None]


def load_image2d(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 PGM as a ``(1, H, W)`` array scaled by its maxval."""
    return decode_pgm(Path(path).read_bytes())


def encode_pgm(img: np.ndarray, maxval: int = 255) -> bytes:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError("PGM holds a single channel")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode() + q.astype(dtype).tobytes()


def save_image2d(path: str | os.PathLike, img: np.ndarray, maxval: int = 65535) -> None:
    Path(path).write_bytes(encode_pgm(img, maxval))


# ---------------------------------------------------------------------------
# MVV
# ---------------------------------------------------------------------------

def encode_mvv(vol: np.ndarray) -> bytes:
    arr = np.asarray(vol)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (B, H, W, S) volume, got shape {arr.shape}")
    b, h, w, s = arr.shape
    payload = np.ascontiguousarray(np.moveaxis(arr, 0, -1)).astype("<f4").tobytes()
    return _MVV_HEADER.pack(MVV_MAGIC, 3, h, w, s, b) + payload


def decode_mvv(buf: bytes) -> np.ndarray:
    if len(buf) < _MVV_HEADER.size:
        raise FormatError("truncated MVV header")
    magic, ndim, h, w, s, b = _MVV_HEADER.unpack_from(buf)
    if magic != MVV_MAGIC:
        raise FormatError(f"bad MVV magic {magic!r}")
    if ndim != 3:
        raise FormatError(f"MVV ndim must be 3, got {ndim}")
    count = h * w * s * b
    payload = buf[_MVV_HEADER.size:]
    if len(payload) != 4 * count:
        raise FormatError(f"MVV payload has {len(payload) // 4} values, header says {count}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, s, b)
    return np.moveaxis(arr.astype(np.float64), -1, 0)


def load_volume3d(path: str | os.PathLike) -> np.ndarray:
    """Read an MVV file as a ``(B, H, W, S)`` float64 array."""
    return decode_mvv(Path(path).read_bytes())


def save_volume3d(path: str | os.PathLike, vol: np.ndarray) -> None:
    Path(path).write_bytes(encode_mvv(vol))


def load_any(path: str | os.PathLike) -> np.ndarray:
    p = str(path)
    if p.endswith(".mvv"):
        return load_volume3d(p)
    return load_image2d(p)


# ---------------------------------------------------------------------------
# cropping / patching
# ---------------------------------------------------------------------------

def center_crop_offsets(shape: Sequence[int], target: Sequence[int]) -> tuple[int, ...]:
    if len(shape) != len(target):
        raise ValueError(f"rank mismatch {tuple(shape)} vs {tuple(target)}")
    for ax, (n, t) in enumerate(zip(shape, target)):
        if t > n or t < 1:
            raise ValueError(f"axis {ax}: crop extent {t} exceeds source extent {n}")
    return tuple((n - t) // 2 for n, t in zip(shape, target))


def center_crop(vol: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Crop the trailing ``len(target)`` axes around the centre."""
    target = tuple(target)
    lead = vol.ndim - len(target)
    offs = center_crop_offsets(vol.shape[lead:], target)
    sl = (slice(None),) * lead + tuple(slice(o, o + t) for o, t in zip(offs, target))
    return vol[sl].copy()


def random_patch_offsets(shape: Sequence[int], edge: int, rng: np.random.Generator) -> tuple[int, ...]:
    for ax, n in enumerate(shape):
        if edge > n:
            raise ValueError(f"axis {ax}: patch edge {edge} exceeds extent {n}")
    return tuple(int(rng.integers(0, n - edge + 1)) for n in shape)


def random_cubic_patch(vol: np.ndarray, edge: int, seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Uniformly placed ``edge``-sided cube from the three trailing axes of ``vol``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    offs = random_patch_offsets(vol.shape[-3:], edge, rng)
    sl = (slice(None),) * (vol.ndim - 3) + tuple(slice(o, o + edge) for o in offs)
    return vol[sl].copy()


def extract_region(img: np.ndarray, box: BoundingBox) -> np.ndarray:
    lead = img.ndim - len(box.offsets)
    if lead < 0 or not box.fits(img.shape[lead:]):
        raise ValueError(f"box {box} outside image of shape {img.shape}")
    return img[(slice(None),) * lead + box.slices()].copy()


# ---------------------------------------------------------------------------
# toy corpora
# ---------------------------------------------------------------------------

@dataclass
class ToyDataset:
    kind: str
    images: np.ndarray  # (n, 1, *size)
    labels: np.ndarray  # (n,) int
    boxes: list[BoundingBox | None]


@dataclass
class ManifestRecord:
    path: str
    label: int | None = None
    boxes: list[BoundingBox] = field(default_factory=list)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    split: str = "train"
    label_set: tuple[int, ...] | None = None


def _smooth_field(rng: np.random.Generator, size: tuple[int, ...], amp: float) -> np.ndarray:
    coarse = rng.normal(size=tuple(max(2, s // 8) for s in size))
    return amp * resize_array(coarse, size, "bilinear")


def _grid(size: tuple[int, ...]) -> list[np.ndarray]:
    return np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij")


def _box_around(center, radius, size) -> BoundingBox:
    lo = [max(0, int(np.floor(c - r))) for c, r in zip(center, radius)]
    hi = [min(n, int(np.ceil(c + r)) + 1) for c, r, n in zip(center, radius, size)]
    return BoundingBox(tuple(lo), tuple(h - l for l, h in zip(lo, hi)))


def _toy_sample(kind: str, size: tuple[int, ...], positive: bool, noise: float,
                rng: np.random.Generator) -> tuple[np.ndarray, BoundingBox | None]:
    base = 0.25 + _smooth_field(rng, size, 0.05) + rng.normal(0.0, noise, size)
    box = None
    if positive:
        grid = _grid(size)
        if kind == "blob2d":
            sigma = rng.uniform(1.5, 3.5)
            center = [rng.uniform(2 * sigma, n - 2 * sigma) for n in size]
            r2 = sum((g - c) ** 2 for g, c in zip(grid, center))
            base = base + rng.uniform(0.45, 0.65) * np.exp(-r2 / (2 * sigma**2))
            box = _box_around(center, [2 * sigma] * 2, size)
        elif kind == "ring2d":
            radius = rng.uniform(3.0, min(size) / 4)
            center = [rng.uniform(radius + 2, n - radius - 2) for n in size]
            r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, center)))
            base = base + 0.5 * np.exp(-((r - radius) ** 2) / 2.0)
            box = _box_around(center, [radius + 2] * 2, size)
        elif kind == "sphere3d":
            radius = rng.uniform(2.5, min(size) / 5)
            center = [rng.uniform(radius + 1, n - radius - 1) for n in size]
            r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, center)))
            base = base + 0.5 / (1.0 + np.exp((r - radius) * 2.0))
            box = _box_around(center, [radius + 1] * 3, size)
        else:  # plane3d
            normal = rng.normal(size=3)
            normal /= np.linalg.norm(normal)
            center = [n / 2 + rng.uniform(-n / 6, n / 6) for n in size]
            dist = sum((g - c) * k for g, c, k in zip(grid, center, normal))
            base = base + 0.5 * np.exp(-(dist**2) / 2.0)
            box = BoundingBox((0, 0, 0), tuple(size))
    return np.clip(base, 0.0, 1.0), box


def generate_toy_dataset(kind: str, n: int, size: int | Sequence[int] = 32,
                         class_balance: float = 0.5, seed: int = 0,
                         noise: float = 0.05) -> ToyDataset:
    """Deterministic labelled corpus; positives carry the structure, negatives only background."""
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy kind {kind!r}; choose from {TOY_KINDS}")
    nd = 3 if kind.endswith("3d") else 2
    size = (size,) * nd if isinstance(size, int) else tuple(size)
    if len(size) != nd or min(size) < 16:
        raise ValueError(f"{kind} needs {nd} extents of at least 16, got {size}")
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0.0 < class_balance < 1.0:
        raise ValueError(f"class_balance must lie in (0, 1), got {class_balance}")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * class_balance))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)
    images = np.empty((n, 1) + size)
    boxes: list[BoundingBox | None] = []
    for i in range(n):
        img, box = _toy_sample(kind, size, bool(labels[i]), noise, rng)
        images[i, 0] = img
        boxes.append(box)
    return ToyDataset(kind, images, labels, boxes)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    lines = []
    for rec in manifest.records:
        label = "" if rec.label is None else str(rec.label)
        box = ";".join(b.to_text() for b in rec.boxes)
        lines.append("\t".join([rec.path, label, box]).rstrip("\t"))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike, split: str = "train",
                  label_set: Sequence[int] | None = None) -> DatasetManifest:
    base = Path(path).parent
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        rel = cols[0]
        full = rel if os.path.isabs(rel) else str(base / rel)
        if not os.path.exists(full):
            raise FormatError(f"{path}:{lineno}: missing sample {full}")
        label = int(cols[1]) if len(cols) > 1 and cols[1] else None
        if label is not None and label_set is not None and label not in label_set:
            raise FormatError(f"{path}:{lineno}: label {label} not in {tuple(label_set)}")
        boxes = [BoundingBox.from_text(b) for b in cols[2].split(";")] if len(cols) > 2 and cols[2] else []
        records.append(ManifestRecord(full, label, boxes))
    return DatasetManifest(records, split, tuple(label_set) if label_set else None)


def save_dataset(ds: ToyDataset, out_dir: str | os.PathLike, split: str = "train") -> DatasetManifest:
    """Write every sample plus ``manifest.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".mvv" if ds.images.ndim == 5 else ".pgm"
    records = []
    for i, img in enumerate(ds.images):
        name = f"{ds.kind}_{i:05d}{ext}"
        if ext == ".pgm":
            save_image2d(out / name, img)
        else:
            save_volume3d(out / name, img)
        box = ds.boxes[i]
        records.append(ManifestRecord(name, int(ds.labels[i]), [box] if box else []))
    manifest = DatasetManifest(records, split, (0, 1))
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


def load_dataset(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, list[list[BoundingBox]]]:
    """Stack every sample into ``(n, B, *dims)``; missing labels become -1."""
    arrays = [load_any(r.path) for r in manifest.records]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise FormatError(f"manifest mixes sample shapes {sorted(shapes)}")
    labels = np.array([-1 if r.label is None else r.label for r in manifest.records], dtype=np.int64)
    return np.stack(arrays), labels, [r.boxes for r in manifest.records]
