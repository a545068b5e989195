"""Separable interpolation operators (align_corners=False).

Each method is expressed as a dense ``(n_out, n_in)`` matrix per axis, so a
resize is a sequence of fixed linear maps. That keeps the same code usable on
plain arrays and, through :func:`medvae.ndtensor.resample_axis`, inside the
autodiff graph.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

METHODS = ("nearest", "bilinear", "bicubic")
_ALIASES = {"linear": "bilinear", "trilinear": "bilinear", "cubic": "bicubic",
            "tricubic": "bicubic"}

CUBIC_A = -0.5


def canonical_method(method: str) -> str:
    m = _ALIASES.get(method, method)
    if m not in METHODS:
        raise ValueError(f"unknown interpolation method {method!r}")
    return m


def cubic_weight(t: np.ndarray | float, a: float = CUBIC_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = ((a + 2) * t[near] - (a + 3)) * t[near] ** 2 + 1
    w[far] = ((a * t[far] - 5 * a) * t[far] + 8 * a) * t[far] - 4 * a
    return w


@lru_cache(maxsize=256)
def _matrix(n_in: int, n_out: int, method: str) -> np.ndarray:
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    dst = np.arange(n_out)
    if method == "nearest":
        src = np.minimum(np.floor(dst * scale).astype(int), n_in - 1)
        m[dst, src] = 1.0
        return m
    src = (dst + 0.5) * scale - 0.5
    if method == "bilinear":
        src = np.maximum(src, 0.0)
        i0 = np.floor(src).astype(int)
        frac = src - i0
        i0 = np.minimum(i0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        np.add.at(m, (dst, i0), 1.0 - frac)
        np.add.at(m, (dst, i1), frac)
        return m
    i0 = np.floor(src).astype(int)
    frac = src - i0
    for off in (-1, 0, 1, 2):
        idx = np.clip(i0 + off, 0, n_in - 1)
        np.add.at(m, (dst, idx), cubic_weight(frac - off))
    return m


def interp_matrix(n_in: int, n_out: int, method: str = "bilinear") -> np.ndarray:
    """Resampling matrix of shape ``(n_out, n_in)`` for one axis."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"invalid extents {n_in} -> {n_out}")
    out = _matrix(int(n_in), int(n_out), canonical_method(method))
    out.flags.writeable = False
    return out


def resize_array(x: np.ndarray, target: tuple[int, ...], method: str = "bilinear") -> np.ndarray:
    """Resize the trailing ``len(target)`` axes of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    target = tuple(int(t) for t in target)
    if any(t < 1 for t in target):
        raise ValueError(f"invalid target dims {target}")
    lead = x.ndim - len(target)
    if lead < 0:
        raise ValueError(f"target rank {len(target)} exceeds array rank {x.ndim}")
    out = x
    for i, n_out in enumerate(target):
        axis = lead + i
        if out.shape[axis] == n_out:
            continue
        mat = interp_matrix(out.shape[axis], n_out, method)
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
    return out
