"""Reconstruction metrics and the latent linear-probe protocol."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import ndtensor as nt
from .imageio import BoundingBox, extract_region
from .ndtensor import ShapeError, Tensor

PSNR_INF = math.inf

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


# ---------------------------------------------------------------------------
# PSNR / MS-SSIM
# ---------------------------------------------------------------------------

def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def _gauss_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray, ndim: int) -> np.ndarray:
    out = x
    for ax in range(x.ndim - ndim, x.ndim):
        view = np.lib.stride_tricks.sliding_window_view(out, len(win), axis=ax)
        out = view @ win
    return out


def _avg_pool2(x: np.ndarray, ndim: int) -> np.ndarray:
    for ax in range(x.ndim - ndim, x.ndim):
        n = x.shape[ax] // 2 * 2
        x = np.take(x, np.arange(n), axis=ax)
        shape = x.shape[:ax] + (n // 2, 2) + x.shape[ax + 1:]
        x = x.reshape(shape).mean(axis=ax + 1)
    return x


def msssim_scales(shape: Sequence[int], requested: int = 5) -> int:
    """Number of scales usable for the given spatial extents (0 if too small)."""
    smallest = min(shape)
    s = requested
    while s > 0 and smallest < 2 ** (s - 1) * WIN_SIZE:
        s -= 1
    return s


def _ssim_parts(x: np.ndarray, y: np.ndarray, ndim: int, data_range: float):
    win = _gauss_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx = _filter_valid(x, win, ndim)
    my = _filter_valid(y, win, ndim)
    sxx = _filter_valid(x * x, win, ndim) - mx * mx
    syy = _filter_valid(y * y, win, ndim) - my * my
    sxy = _filter_valid(x * y, win, ndim) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ms_ssim(x: np.ndarray, y: np.ndarray, ndim: int = 2, data_range: float = 1.0,
            scales: int = 5) -> float:
    """Multi-scale SSIM over the trailing ``ndim`` axes.

    Uses an 11-tap Gaussian window (sigma 1.5), k1=0.01, k2=0.03 and the
    five standard scale weights. Images smaller than ``2**(scales-1) * 11`` use
    fewer scales with the leading weights renormalised; see :func:`msssim_scales`.
    Negative contrast terms are clipped to zero before exponentiation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ms_ssim shape mismatch {x.shape} vs {y.shape}")
    n_scales = msssim_scales(x.shape[-ndim:], scales)
    if n_scales == 0:
        raise ShapeError(f"image extents {x.shape[-ndim:]} below the {WIN_SIZE}-pixel window")
    weights = np.array(MSSSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    value = 1.0
    for j in range(n_scales):
        ssim_val, cs_val = _ssim_parts(x, y, ndim, data_range)
        if j == n_scales - 1:
            value *= max(ssim_val, 0.0) ** weights[j]
        else:
            value *= max(cs_val, 0.0) ** weights[j]
            x = _avg_pool2(x, ndim)
            y = _avg_pool2(y, ndim)
    return float(value)


def region_psnr(x: np.ndarray, x_hat: np.ndarray, boxes: Sequence[BoundingBox],
                peak: float = 1.0) -> list[float]:
    return [psnr(extract_region(x, b), extract_region(x_hat, b), peak) for b in boxes]


@dataclass
class MetricReport:
    psnr: list[float]
    ms_ssim: list[float]
    seeds: list[int]
    names: list[str] = field(default_factory=list)
    region_psnr: list[float | None] = field(default_factory=list)
    msssim_scales: int = 5

    @property
    def count(self) -> int:
        return len(self.psnr)

    @staticmethod
    def _stats(values: Sequence[float]) -> tuple[float, float]:
        arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
        if arr.size == 0:
            return math.nan, math.nan
        if np.isinf(arr).any():  # identical reconstructions: mean is the +inf sentinel
            return math.inf, math.nan
        return float(arr.mean()), float(arr.std())

    @property
    def psnr_mean(self) -> float:
        return self._stats(self.psnr)[0]

    @property
    def psnr_std(self) -> float:
        return self._stats(self.psnr)[1]

    @property
    def ms_ssim_mean(self) -> float:
        return self._stats(self.ms_ssim)[0]

    @property
    def ms_ssim_std(self) -> float:
        return self._stats(self.ms_ssim)[1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "name", "psnr", "ms_ssim", "ms_ssim_scales", "region_psnr", "seed"])
            for i in range(self.count):
                name = self.names[i] if i < len(self.names) else ""
                reg = self.region_psnr[i] if i < len(self.region_psnr) else None
                w.writerow([i, name, repr(self.psnr[i]), repr(self.ms_ssim[i]), self.msssim_scales,
                            "" if reg is None else repr(reg), self.seeds[i]])

    def summary(self) -> str:
        return (f"n={self.count} PSNR {self.psnr_mean:.3f} +- {self.psnr_std:.3f} dB, "
                f"MS-SSIM {self.ms_ssim_mean:.4f} +- {self.ms_ssim_std:.4f} "
                f"({self.msssim_scales} scales)")


def evaluate_reconstructions(originals: np.ndarray, recons: np.ndarray, ndim: int = 2,
                             seed: int = 0, names: Sequence[str] = (),
                             boxes: Sequence[Sequence[BoundingBox]] | None = None) -> MetricReport:
    """Per-sample PSNR/MS-SSIM (and region PSNR when boxes are given) on ``(n, B, *dims)`` arrays."""
    if originals.shape != recons.shape:
        raise ShapeError(f"{originals.shape} vs {recons.shape}")
    p, m, r = [], [], []
    for i, (x, y) in enumerate(zip(originals, recons)):
        p.append(psnr(x, y))
        m.append(ms_ssim(x, y, ndim=ndim))
        if boxes is not None:
            bs = boxes[i]
            vals = [v for v in region_psnr(x, y, bs)] if bs else []
            r.append(float(np.mean(vals)) if vals else None)
    return MetricReport(p, m, [seed] * len(p), list(names), r,
                        msssim_scales(originals.shape[-ndim:]))


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------

def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC; ties between a positive and a negative count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = int((y == 0).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both classes present")
    if n1 + n0 != y.size:
        raise ValueError("labels must be 0 or 1")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def macro_auroc(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Unweighted mean of one-vs-rest AUROCs over classes present in ``labels``.

    ``scores`` is ``(n, K)``; classes with no sample are skipped with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise ShapeError(f"scores {scores.shape} do not match {y.size} labels")
    present = set(np.unique(y).tolist())
    if len(present) < 2:
        raise ValueError("macro AUROC needs at least two classes present")
    values = []
    for k in range(scores.shape[1]):
        if k not in present:
            warnings.warn(f"class {k} absent from labels; excluded from macro AUROC",
                          stacklevel=2)
            continue
        values.append(auroc(scores[:, k], (y == k).astype(int)))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def channel_mean(latent, channel_axis: int = 1):
    """Average over the channel axis, keeping it as a singleton."""
    if isinstance(latent, Tensor):
        if latent.shape[channel_axis] == 1:
            return latent
        return nt.tmean(latent, axis=channel_axis, keepdims=True)
    arr = np.asarray(latent, dtype=np.float64)
    if arr.shape[channel_axis] == 1:
        return arr
    return arr.mean(axis=channel_axis, keepdims=True)


@dataclass
class LabeledLatentDataset:
    latents: np.ndarray  # (n, 1, *dims)
    labels: np.ndarray
    split: str = "train"

    @classmethod
    def from_latents(cls, latents: np.ndarray, labels, split: str = "train") -> LabeledLatentDataset:
        return cls(channel_mean(np.asarray(latents, dtype=np.float64)),
                   np.asarray(labels, dtype=np.int64), split)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    weighted_sampling: bool = False
    seed: int = 0
    backbone_seed: int = 0
    widths: tuple[int, ...] = (16, 32, 64)


class ProbeBackbone:
    """Frozen seeded-random conv stack (stride 2, leaky-ReLU) with global average pooling."""

    def __init__(self, widths=(16, 32, 64), seed: int = 0):
        self.widths = tuple(widths)
        self.seed = seed
        self._weights: dict[int, list[tuple[Tensor, Tensor]]] = {}

    def _layers(self, ndim: int) -> list[tuple[Tensor, Tensor]]:
        if ndim not in self._weights:
            rng = np.random.default_rng(self.seed + 100 * ndim)
            layers, cin = [], 1
            for w in self.widths:
                fan_in = cin * 3**ndim
                layers.append((Tensor(rng.normal(0, math.sqrt(2.0 / fan_in), (w, cin) + (3,) * ndim)),
                               Tensor(rng.normal(0, 0.1, w))))
                cin = w
            self._weights[ndim] = layers
        return self._weights[ndim]

    @property
    def out_features(self) -> int:
        return self.widths[-1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        h = Tensor(x)
        with nt.no_grad():
            for w, b in self._layers(x.ndim - 2):
                h = nt.leaky_relu(nt.conv(h, w, b, stride=2, padding=1), 0.2)
            return h.data.mean(axis=tuple(range(2, x.ndim)))

    def features(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        return np.concatenate([self(x[i:i + batch]) for i in range(0, len(x), batch)])

    def parameter_count(self, ndim: int) -> int:
        return sum(w.size + b.size for w, b in self._layers(ndim))

    def activation_elements(self, dims: Sequence[int]) -> int:
        """Per-sample element count of the input and every intermediate map."""
        total = math.prod(dims)
        ext = list(dims)
        for w in self.widths:
            ext = [(e + 2 - 3) // 2 + 1 for e in ext]
            total += w * math.prod(ext)
        return total


@dataclass
class Probe:
    backbone: ProbeBackbone
    weight: np.ndarray  # (F, K)
    bias: np.ndarray  # (K,)
    feat_mean: np.ndarray
    feat_std: np.ndarray
    n_classes: int

    def logits_from_features(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.feat_mean) / self.feat_std) @ self.weight + self.bias

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.logits_from_features(self.backbone(x))

    def scores(self, x: np.ndarray) -> np.ndarray:
        logits = self.logits_from_features(self.backbone.features(x))
        if self.n_classes == 2:
            return logits[:, 0]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def weighted_sample_indices(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` indices with replacement, each class equally likely overall."""
    labels = np.asarray(labels)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    p = 1.0 / counts[inverse]
    p /= p.sum()
    return rng.choice(len(labels), size=n, replace=True, p=p)


def train_probe(config: ProbeConfig, train: LabeledLatentDataset,
                backbone: ProbeBackbone | None = None) -> Probe:
    """Fit a linear head on frozen backbone features with AdamW.

    Binary tasks use one logit with BCE; K-class tasks use K logits with
    softmax cross-entropy. The head starts at zero.
    """
    labels = np.asarray(train.labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("probe training needs at least two classes")
    n_classes = int(labels.max()) + 1
    backbone = backbone or ProbeBackbone(config.widths, config.backbone_seed)
    feats = backbone.features(train.latents)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0) + 1e-8
    z = (feats - mean) / std
    k = 1 if n_classes == 2 else n_classes
    w = Tensor(np.zeros((z.shape[1], k)), requires_grad=True)
    b = Tensor(np.zeros(k), requires_grad=True)
    opt = nt.AdamW([w, b], lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(labels)
    for _ in range(config.epochs):
        if config.weighted_sampling:
            order = weighted_sample_indices(labels, n, rng)
        else:
            order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            logits = Tensor(z[idx]) @ w + b
            if k == 1:
                loss = nt.bce_with_logits(logits, labels[idx].astype(np.float64))
            else:
                loss = nt.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return Probe(backbone, w.data.copy(), b.data.copy(), mean, std, max(n_classes, 2))


def eval_probe(probe: Probe, test: LabeledLatentDataset) -> float:
    """AUROC for binary tasks, macro AUROC otherwise."""
    s = probe.scores(test.latents)
    if probe.n_classes == 2:
        return auroc(s, test.labels)
    return macro_auroc(s, test.labels)


@dataclass
class AurocReport:
    name: str
    seeds: list[int]
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "seed", "auroc"])
            for s, v in zip(self.seeds, self.values):
                w.writerow([self.name, s, repr(v)])


def probe_protocol(config: ProbeConfig, train: LabeledLatentDataset, test: LabeledLatentDataset,
                   seeds: Sequence[int] = (0, 1, 2), name: str = "probe") -> AurocReport:
    """Train/evaluate one probe per seed; identical pipeline for images, baselines and latents."""
    if set(np.unique(test.labels)) - set(np.unique(train.labels)):
        raise ValueError("test labels not covered by the training set")
    backbone = ProbeBackbone(config.widths, config.backbone_seed)
    values = []
    for s in seeds:
        cfg = ProbeConfig(**{**config.__dict__, "seed": s})
        values.append(eval_probe(train_probe(cfg, train, backbone), test))
    return AurocReport(name, list(seeds), values)
