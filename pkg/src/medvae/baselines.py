"""Comparison methods: interpolation down/up-sizing and 2D-on-3D stitching."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ndtensor as nt
from .interp import canonical_method, resize_array
from .ndtensor import ShapeError, Tensor
from .vae import ProjectionHead, VAEModel, _integer_root


def interp_resize(x: np.ndarray, method: str, target: Sequence[int]) -> np.ndarray:
    """Resize the trailing ``len(target)`` axes; ``trilinear``/``tricubic`` are accepted aliases."""
    return resize_array(x, tuple(target), canonical_method(method))


def per_axis_factor(f: int, ndim: int) -> int:
    root = _integer_root(f, ndim)
    if root is None or root & (root - 1):
        raise ValueError(f"f={f} has no power-of-two per-axis factor in {ndim}D")
    return root


def baseline_downsize_roundtrip(x: np.ndarray, method: str, f: int, ndim: int = 2):
    """Down-size by ``f`` (area or volume) and back; returns ``(low_res, reconstruction)``."""
    x = np.asarray(x, dtype=np.float64)
    k = per_axis_factor(f, ndim)
    dims = x.shape[-ndim:]
    for ax, d in enumerate(dims):
        if d % k:
            raise ShapeError(f"spatial axis {ax}: extent {d} not divisible by {k}")
    low = interp_resize(x, method, tuple(d // k for d in dims))
    return low, interp_resize(low, method, dims)


def _slices_as_batch(vol: np.ndarray) -> np.ndarray:
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim == 3:
        vol = vol[None]
    if vol.ndim != 4 or vol.shape[0] != 1:
        raise ShapeError(f"expected a (1, H, W, S) volume, got {vol.shape}")
    return np.moveaxis(vol, -1, 0)  # (S, 1, H, W)


def _encode_slices(model2d: VAEModel, vol: np.ndarray, head: ProjectionHead | None,
                   batch: int = 32) -> np.ndarray:
    slices = _slices_as_batch(vol)
    out = []
    with nt.no_grad():
        for i in range(0, len(slices), batch):
            z = model2d.encode(Tensor(slices[i:i + batch])).mean
            if head is not None:
                z = head(z)
            out.append(z.data)
    return np.moveaxis(np.concatenate(out), 0, -1)  # (C, h, w, S)


def stitch_2d_latents(model2d: VAEModel, vol: np.ndarray, target_f: int | None = None,
                      target_depth: int | None = None, head: ProjectionHead | None = None) -> np.ndarray:
    """Encode each depth slice, stack along depth, then linearly resample depth.

    By default the depth is resampled to what a 3D model with volume factor
    ``target_f`` would produce (``S / cbrt(target_f)``); ``target_depth``
    overrides that when a different size convention is wanted. Returns
    ``(C, h, w, d)``.
    """
    if model2d.config.ndim != 2:
        raise ValueError("stitching needs a 2D model")
    k2 = model2d.config.per_axis
    target_f = target_f or k2**3
    k3 = per_axis_factor(target_f, 3)
    if k3 != k2:
        raise ValueError(
            f"2D per-axis factor {k2} cannot match a 3D f={target_f} latent (per-axis {k3})")
    stacked = _encode_slices(model2d, vol, head)
    depth = stacked.shape[-1]
    if target_depth is None:
        if depth % k3:
            raise ShapeError(f"depth {depth} not divisible by {k3}")
        target_depth = depth // k3
    if target_depth == depth:
        return stacked
    return resize_array(stacked, (target_depth,), "bilinear")


def stitch_2d_reconstructions(model2d: VAEModel, vol: np.ndarray, batch: int = 32) -> np.ndarray:
    """Slice-wise encode (posterior mean) and decode, restacked to ``(1, H, W, S)``."""
    slices = _slices_as_batch(vol)
    out = []
    with nt.no_grad():
        for i in range(0, len(slices), batch):
            x = Tensor(slices[i:i + batch])
            out.append(model2d.decode(model2d.encode(x).mean).data)
    return np.moveaxis(np.concatenate(out), 0, -1)
