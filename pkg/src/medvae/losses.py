"""Training objectives: perceptual, KL, hinge adversarial, embedding consistency."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .interp import interp_matrix
from .ndtensor import ShapeError, Tensor
from .vae import LatentDist, ParamSet


class FeatureEmbedder(ParamSet):
    """Frozen, seeded-random conv feature extractor.

    Three 3x3 conv layers (strides 1, 2, 2) with leaky-ReLU. ``features``
    returns every layer's map for perceptual distances; ``embed`` pools the
    last two layers into a unit-norm vector. Inputs whose spatial extent
    differs from ``in_extent`` are bilinearly resized first, and multi-channel
    inputs are averaged over channels.
    """

    def __init__(self, in_extent: tuple[int, int] = (32, 32), widths=(8, 16, 32), seed: int = 1234):
        super().__init__()
        self.in_extent = tuple(in_extent)
        rng = np.random.default_rng(seed)
        cin = 1
        for i, w in enumerate(widths):
            fan_in = cin * 9
            self.add(f"emb.l{i}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (w, cin, 3, 3)),
                     requires_grad=False)
            self.add(f"emb.l{i}.bias", rng.normal(0.0, 0.1, w), requires_grad=False)
            cin = w
        self.strides = (1, 2, 2)[: len(widths)]
        self.embed_dim = sum(widths[-2:])

    def prepare(self, x) -> Tensor:
        x = nt._as_tensor(x)
        if x.ndim != 4:
            raise ShapeError(f"embedder takes (N, C, H, W), got {x.shape}")
        if x.shape[1] != 1:
            x = nt.tmean(x, axis=1, keepdims=True)
        for ax, target in zip((2, 3), self.in_extent):
            if x.shape[ax] != target:
                x = nt.resample_axis(x, interp_matrix(x.shape[ax], target, "bilinear"), ax)
        return x

    def features(self, x) -> list[Tensor]:
        h = self.prepare(x)
        feats = []
        for i, s in enumerate(self.strides):
            h = nt.leaky_relu(nt.conv(h, self[f"emb.l{i}.weight"], self[f"emb.l{i}.bias"],
                                      stride=s, padding=1), 0.2)
            feats.append(h)
        return feats

    def embed(self, x) -> Tensor:
        feats = self.features(x)
        pooled = nt.concat([nt.tmean(f, axis=(2, 3)) for f in feats[-2:]], axis=1)
        norm = nt.power(nt.tsum(pooled * pooled, axis=1, keepdims=True) + 1e-12, 0.5)
        return pooled / norm


def _unit_channels(f: Tensor, eps: float = 1e-10) -> Tensor:
    return f / nt.power(nt.tsum(f * f, axis=1, keepdims=True) + eps, 0.5)


def perceptual_loss(emb: FeatureEmbedder, x, x_hat) -> Tensor:
    """Sum over layers of the mean squared distance of channel-normalised features."""
    x, x_hat = nt._as_tensor(x), nt._as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"perceptual_loss shape mismatch {x.shape} vs {x_hat.shape}")
    n = x.shape[0]
    both = emb.features(nt.concat([x, x_hat], axis=0))
    total = Tensor(0.0)
    for f in both:
        u = _unit_channels(f)
        d = u[:n] - u[n:]
        total = total + nt.tmean(nt.tsum(d * d, axis=1))
    return total


def kl_penalty(dist: LatentDist) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)), averaged over elements."""
    mu, lv = dist.mean, dist.logvar
    return nt.tmean((mu * mu + nt.exp(lv) - lv - 1.0) * 0.5)


class Discriminator(ParamSet):
    """Patch discriminator: three stride-2 convs then a 1-channel score conv."""

    def __init__(self, widths=(16, 32, 64), seed: int = 7):
        super().__init__()
        rng = np.random.default_rng(seed)
        cin = 1
        self.n_layers = len(widths) + 1
        for i, w in enumerate(list(widths) + [1]):
            fan_in = cin * 9
            self.add(f"disc.l{i}.weight", rng.normal(0.0, np.sqrt(1.0 / fan_in), (w, cin, 3, 3)))
            self.add(f"disc.l{i}.bias", np.zeros(w))
            cin = w

    def __call__(self, x) -> Tensor:
        h = nt._as_tensor(x)
        if h.ndim != 4 or h.shape[1] != 1:
            raise ShapeError(f"discriminator takes (N, 1, H, W), got {h.shape}")
        for i in range(self.n_layers):
            last = i == self.n_layers - 1
            h = nt.conv(h, self[f"disc.l{i}.weight"], self[f"disc.l{i}.bias"],
                        stride=1 if last else 2, padding=1)
            if not last:
                h = nt.leaky_relu(h, 0.2)
        return h


def disc_loss(d: Discriminator, x_real, x_fake) -> Tensor:
    x_real, x_fake = nt._as_tensor(x_real), nt._as_tensor(x_fake)
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"disc_loss shape mismatch {x_real.shape} vs {x_fake.shape}")
    return hinge_disc(d(x_real), d(x_fake))


def hinge_disc(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return nt.tmean(nt.relu(1.0 - real_scores)) + nt.tmean(nt.relu(1.0 + fake_scores))


def gen_loss(d: Discriminator, x_fake) -> Tensor:
    return -nt.tmean(d(x_fake))


def embedding_consistency(emb: FeatureEmbedder, a, b) -> Tensor:
    """Batch mean of ``||b(a) - b(b)||^2`` for unit-norm embeddings (range [0, 4])."""
    ea, eb = emb.embed(a), emb.embed(b)
    d = ea - eb
    return nt.tmean(nt.tsum(d * d, axis=1))


@dataclass(frozen=True)
class LossWeights:
    w_rec: float = 1.0
    w_perc: float = 1.0
    w_kl: float = 1e-6
    w_emb: float = 0.1
    w_adv: float = 0.5
    adv_start_step: int = 3125

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


LOG_COLUMNS = ("loss_total", "loss_rec", "loss_perc", "loss_kl", "loss_emb", "loss_adv", "loss_disc")


def stage1_total(weights: LossWeights, x, x_hat, dist: LatentDist, step: int, *,
                 emb: FeatureEmbedder | None = None, disc: Discriminator | None = None
                 ) -> tuple[Tensor, dict[str, float]]:
    """Weighted generator objective and its unweighted components.

    The adversarial term joins only once ``step >= adv_start_step``; terms with
    zero weight are not evaluated and log as 0.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    x, x_hat = nt._as_tensor(x), nt._as_tensor(x_hat)
    total = Tensor(0.0)
    log = dict.fromkeys(LOG_COLUMNS, 0.0)

    def term(key, weight, fn):
        nonlocal total
        if weight == 0:
            return
        val = fn()
        log[key] = val.item()
        total = total + val * weight

    term("loss_rec", weights.w_rec, lambda: nt.l1(x_hat, x))
    term("loss_perc", weights.w_perc, lambda: perceptual_loss(emb, x, x_hat))
    term("loss_kl", weights.w_kl, lambda: kl_penalty(dist))
    term("loss_emb", weights.w_emb, lambda: embedding_consistency(emb, x, x_hat))
    if step >= weights.adv_start_step:
        term("loss_adv", weights.w_adv, lambda: gen_loss(disc, x_hat))
    log["loss_total"] = total.item()
    return total, log


def fold_slices(vol, axis: int = -1) -> Tensor:
    """``(N, C, H, W, S)`` -> ``(N*S, C, H, W)`` with slices along ``axis``."""
    vol = nt._as_tensor(vol)
    if vol.ndim != 5:
        raise ShapeError(f"expected (N, C, H, W, S), got {vol.shape}")
    axis = axis % 5
    if axis < 2:
        raise ShapeError("slice axis must be spatial")
    moved = nt.moveaxis(vol, axis, 1)  # (N, S, C, a, b)
    n, s, c = moved.shape[:3]
    return nt.reshape(moved, (n * s, c) + moved.shape[3:])


def per_slice_loss(loss_fn: Callable, vol, vol_hat, axis: int = -1, batched: bool = True) -> Tensor:
    """Mean over slices of ``loss_fn`` on corresponding 2D slices.

    ``batched=True`` folds every slice into the batch and calls ``loss_fn``
    once, which is exact whenever ``loss_fn`` is a batch mean of per-sample
    terms; ``batched=False`` evaluates slice by slice.
    """
    vol, vol_hat = nt._as_tensor(vol), nt._as_tensor(vol_hat)
    if vol.shape != vol_hat.shape:
        raise ShapeError(f"per_slice_loss shape mismatch {vol.shape} vs {vol_hat.shape}")
    if batched:
        return loss_fn(fold_slices(vol, axis), fold_slices(vol_hat, axis))
    axis = axis % vol.ndim
    total = Tensor(0.0)
    s = vol.shape[axis]
    for i in range(s):
        idx = (slice(None),) * axis + (i,)
        total = total + loss_fn(vol[idx], vol_hat[idx])
    return total / s


def stage2_3d_total(weights: LossWeights, x, x_hat, dist: LatentDist, step: int, *,
                    emb: FeatureEmbedder, disc: Discriminator | None = None, axis: int = -1):
    """3D objective: the 2D generator loss evaluated per slice, without the embedding term."""
    no_emb = LossWeights(weights.w_rec, weights.w_perc, weights.w_kl, 0.0, weights.w_adv,
                         weights.adv_start_step)
    return per_slice_loss(
        lambda a, b: stage1_total(no_emb, a, b, dist, step, emb=emb, disc=disc),
        x, x_hat, axis)
