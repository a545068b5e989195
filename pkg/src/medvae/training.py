"""Two-stage training loops, checkpointing and deterministic resumption.

Desk-scale defaults: 32x32 images / 32^3 volumes, patch edge 16, batch 8,
a few hundred steps. The reference runs used 100k steps at batch 32 for the
2D base models and 35k-140k steps for the 3D models; those numbers are the
provenance for ``adv_start_step = 3125`` and ``w_kl = 1e-6``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import ndtensor as nt
from .imageio import random_patch_offsets
from .losses import (LOG_COLUMNS, Discriminator, FeatureEmbedder, LossWeights, disc_loss,
                     embedding_consistency, fold_slices, hinge_disc, perceptual_loss,
                     per_slice_loss, stage1_total, stage2_3d_total)
from .ndtensor import AdamW, ShapeError, Tensor
from .vae import (ProjectionHead, VAEConfig, VAEModel, apply_lora, inflate_2d_to_3d,
                  model_from_parts)

log = logging.getLogger(__name__)

STAGES = ("s1_2d", "s2_2d", "s2_3d", "decoder_finetune")


class TrainingError(RuntimeError):
    """Divergence or invalid training setup."""


class StageMismatchError(ValueError):
    """A checkpoint does not fit the trainer it is handed to."""


@dataclass
class TrainConfig:
    stage: str = "s1_2d"
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    w_rec: float = 1.0
    w_perc: float = 1.0
    w_kl: float = 1e-6
    w_emb: float = 0.1
    w_adv: float = 0.5
    adv_start_step: int = 3125
    patch_edge: int = 16
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    checkpoint_path: str = ""
    log_path: str = ""
    train_manifest: str = ""
    base_checkpoint: str = ""
    # model shape (stage 1 builds the model from these)
    f: int = 16
    latent_channels: int = 1
    width: int = 32
    groups: int = 8
    lora_rank: int = 0
    # stage 2
    head_hidden: int = 16
    target_f: int = 0
    embed_extent: int = 32

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.steps <= 0:
            raise ValueError("steps must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage == "s2_3d" and self.patch_edge < 1:
            raise ValueError("s2_3d needs a positive patch_edge")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_rec, self.w_perc, self.w_kl, self.w_emb, self.w_adv,
                           self.adv_start_step)

    def model_config(self) -> VAEConfig:
        return VAEConfig(ndim=2, f=self.f, latent_channels=self.latent_channels,
                         width=self.width, groups=self.groups)


def parse_config_text(text: str, env: dict | None = None) -> TrainConfig:
    """``key = value`` lines, ``#`` comments; unknown keys are fatal.

    ``MEDVAE_SEED`` in ``env`` (default: the process environment) overrides ``seed``.
    """
    types = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(types[key], val, key)
    env = os.environ if env is None else env
    if env.get("MEDVAE_SEED"):
        values["seed"] = int(env["MEDVAE_SEED"])
    return TrainConfig(**values)


def _coerce(typ, val: str, key: str):
    try:
        if typ in (int, "int"):
            return int(val)
        if typ in (float, "float"):
            return float(val)
    except ValueError as exc:
        raise ValueError(f"{key}: cannot parse {val!r}") from exc
    return val


def load_config(path: str | os.PathLike, **overrides) -> TrainConfig:
    cfg = parse_config_text(Path(path).read_text())
    return replace(cfg, **overrides) if overrides else cfg


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    model: VAEModel
    rng: np.random.Generator
    step: int = 0
    head: ProjectionHead | None = None
    disc: Discriminator | None = None
    opt_g: AdamW | None = None
    opt_d: AdamW | None = None
    log: list[dict] = field(default_factory=list)

    def generator_params(self) -> list[tuple[str, Tensor]]:
        stage = self.config.stage
        if stage == "s2_2d":
            return self.head.named_parameters()
        if stage == "decoder_finetune":
            return [(n, p) for n, p in self.model.named_parameters("dec.") if p.requires_grad]
        return [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]


def _make_opt(cfg: TrainConfig, params) -> AdamW:
    return AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _embedder(cfg: TrainConfig) -> FeatureEmbedder:
    return FeatureEmbedder((cfg.embed_extent, cfg.embed_extent))


def _init_state(cfg: TrainConfig, model: VAEModel, head=None, with_disc: bool = True) -> TrainState:
    st = TrainState(cfg, model, np.random.default_rng(cfg.seed), head=head,
                    disc=Discriminator(seed=cfg.seed + 7) if with_disc else None)
    st.opt_g = _make_opt(cfg, [p for _, p in st.generator_params()])
    if st.disc is not None:
        st.opt_d = _make_opt(cfg, st.disc.parameters())
    return st


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"loss became {value} at step {step}; aborting")


def _gen_update(st: TrainState, loss: Tensor) -> None:
    st.opt_g.zero_grad()
    loss.backward()
    if st.config.grad_clip > 0:
        nt.clip_grad_norm(st.opt_g.params, st.config.grad_clip)
    st.opt_g.step()


def _disc_update(st: TrainState, real: Tensor, fake: Tensor) -> float:
    st.disc.set_requires_grad(True)
    st.opt_d.zero_grad()
    d = disc_loss(st.disc, real, fake.detach())
    d.backward()
    st.opt_d.step()
    return d.item()


def _record(st: TrainState, row: dict) -> None:
    row = {"step": st.step, **{k: float(row.get(k, 0.0)) for k in LOG_COLUMNS}}
    st.log.append(row)
    st.step += 1
    every = st.config.checkpoint_every
    if every and st.config.checkpoint_path and st.step % every == 0:
        save_checkpoint(st, st.config.checkpoint_path)


def _batch_indices(st: TrainState, n: int) -> np.ndarray:
    return st.rng.choice(n, size=min(st.config.batch_size, n), replace=False)


# ---------------------------------------------------------------------------
# stage 1 (2D base autoencoder)
# ---------------------------------------------------------------------------

def new_stage1_state(cfg: TrainConfig, model: VAEModel | None = None) -> TrainState:
    if model is None:
        model = VAEModel(cfg.model_config(), seed=cfg.seed)
        if cfg.lora_rank:
            model = apply_lora(model, cfg.lora_rank, seed=cfg.seed)
    if model.config.ndim != 2:
        raise StageMismatchError("stage 1 trains 2D models only")
    return _init_state(cfg, model)


def stage1_step(st: TrainState, x: np.ndarray, emb: FeatureEmbedder) -> dict:
    cfg = st.config
    xt = Tensor(x)
    adv = st.step >= cfg.adv_start_step
    st.disc.set_requires_grad(False)
    x_hat, dist = st.model.forward(xt, seed=st.rng)
    loss, row = stage1_total(cfg.weights, xt, x_hat, dist, st.step, emb=emb, disc=st.disc)
    _check_finite(row["loss_total"], st.step)
    _gen_update(st, loss)
    if adv:
        row["loss_disc"] = _disc_update(st, xt, x_hat)
    return row


def train_stage1(config: TrainConfig, model: VAEModel | None, data: np.ndarray,
                 state: TrainState | None = None, emb: FeatureEmbedder | None = None) -> TrainState:
    """Generator-only updates before ``adv_start_step``; 1:1 G/D alternation after."""
    if config.stage != "s1_2d":
        raise StageMismatchError(f"train_stage1 got stage {config.stage!r}")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4:
        raise ShapeError(f"stage 1 expects (n, 1, H, W) images, got {data.shape}")
    st = state or new_stage1_state(config, model)
    emb = emb or _embedder(config)
    while st.step < config.steps:
        x = data[_batch_indices(st, len(data))]
        _record(st, stage1_step(st, x, emb))
    _finish(st)
    return st


# ---------------------------------------------------------------------------
# stage 2, 2D: projection head on a frozen VAE
# ---------------------------------------------------------------------------

def new_stage2_2d_state(cfg: TrainConfig, base: VAEModel) -> TrainState:
    if base.config.ndim != 2:
        raise StageMismatchError("2D stage 2 needs a 2D base model")
    model = base.clone()
    model.set_requires_grad(False)
    head = ProjectionHead(model.config.latent_channels, 2, cfg.head_hidden, seed=cfg.seed)
    return _init_state(cfg, model, head=head, with_disc=False)


def frozen_latents(model: VAEModel, data: np.ndarray, batch: int = 32) -> np.ndarray:
    """Posterior means for every sample, computed without a graph."""
    out = []
    with nt.no_grad():
        for i in range(0, len(data), batch):
            out.append(model.encode(Tensor(data[i:i + batch])).mean.data)
    return np.concatenate(out)


def stage2_2d_loss(head: ProjectionHead, emb: FeatureEmbedder, x, z) -> Tensor:
    return embedding_consistency(emb, x, head(z))


def train_stage2_2d(config: TrainConfig, base: VAEModel | None, emb: FeatureEmbedder | None,
                    data: np.ndarray, state: TrainState | None = None) -> TrainState:
    """Optimise only the projection head; VAE weights stay bit-identical."""
    if config.stage != "s2_2d":
        raise StageMismatchError(f"train_stage2_2d got stage {config.stage!r}")
    st = state or new_stage2_2d_state(config, base)
    emb = emb or _embedder(config)
    data = np.asarray(data, dtype=np.float64)
    latents = frozen_latents(st.model, data)
    while st.step < config.steps:
        idx = _batch_indices(st, len(data))
        loss = stage2_2d_loss(st.head, emb, Tensor(data[idx]), Tensor(latents[idx]))
        _check_finite(loss.item(), st.step)
        _gen_update(st, loss)
        _record(st, {"loss_total": loss.item(), "loss_emb": loss.item()})
    _finish(st)
    return st


# ---------------------------------------------------------------------------
# stage 2, 3D: inflate and fine-tune on random cubic patches
# ---------------------------------------------------------------------------

def check_inflation_factor(base2d: VAEModel, target_f: int) -> int:
    f3 = base2d.config.per_axis**3
    if target_f and target_f != f3:
        raise ValueError(
            f"2D f={base2d.config.f} (per-axis {base2d.config.per_axis}) inflates to 3D f={f3}, "
            f"not f={target_f}")
    return f3


def new_stage2_3d_state(cfg: TrainConfig, base2d: VAEModel) -> TrainState:
    if base2d.config.ndim != 2:
        raise StageMismatchError("3D stage 2 is seeded from a 2D model; got a 3D model")
    check_inflation_factor(base2d, cfg.target_f)
    return _init_state(cfg, inflate_2d_to_3d(base2d))


def stage2_3d_loss(model: VAEModel, emb: FeatureEmbedder, disc: Discriminator | None,
                   weights: LossWeights, vol, step: int, rng=None, deterministic: bool = False):
    vol = nt._as_tensor(vol)
    x_hat, dist = model.forward(vol, seed=rng, deterministic=deterministic)
    loss, row = stage2_3d_total(weights, vol, x_hat, dist, step, emb=emb, disc=disc)
    return loss, row, x_hat


def sample_patches(st: TrainState, vols: np.ndarray) -> np.ndarray:
    edge = st.config.patch_edge
    idx = _batch_indices(st, len(vols))
    out = []
    for i in idx:
        offs = random_patch_offsets(vols.shape[-3:], edge, st.rng)
        out.append(vols[i][(slice(None),) + tuple(slice(o, o + edge) for o in offs)])
    return np.stack(out)


def train_stage2_3d(config: TrainConfig, base2d: VAEModel | None, data3d: np.ndarray,
                    state: TrainState | None = None, emb: FeatureEmbedder | None = None) -> TrainState:
    if config.stage != "s2_3d":
        raise StageMismatchError(f"train_stage2_3d got stage {config.stage!r}")
    data3d = np.asarray(data3d, dtype=np.float64)
    if data3d.ndim != 5:
        raise ShapeError(f"expected (n, 1, H, W, S) volumes, got {data3d.shape}")
    st = state or new_stage2_3d_state(config, base2d)
    if st.model.config.ndim != 3:
        raise StageMismatchError("3D trainer handed a 2D model; inflate it first")
    emb = emb or _embedder(config)
    while st.step < config.steps:
        patch = Tensor(sample_patches(st, data3d))
        st.disc.set_requires_grad(False)
        loss, row, x_hat = stage2_3d_loss(st.model, emb, st.disc, config.weights, patch,
                                          st.step, rng=st.rng)
        _check_finite(row["loss_total"], st.step)
        _gen_update(st, loss)
        if st.step >= config.adv_start_step:
            st.disc.set_requires_grad(True)
            st.opt_d.zero_grad()
            d = hinge_disc(st.disc(fold_slices(patch)), st.disc(fold_slices(x_hat.detach())))
            d.backward()
            st.opt_d.step()
            row["loss_disc"] = d.item()
        _record(st, row)
    _finish(st)
    return st


# ---------------------------------------------------------------------------
# decoder-only fine-tuning on stitched 2D latents
# ---------------------------------------------------------------------------

def new_decoder_finetune_state(cfg: TrainConfig, model2d: VAEModel) -> TrainState:
    if model2d.config.ndim != 2:
        raise StageMismatchError("decoder fine-tuning starts from a 2D model")
    model = inflate_2d_to_3d(model2d)
    model.set_requires_grad(False, "enc.")
    return _init_state(cfg, model, with_disc=False)


def train_decoder_finetune(config: TrainConfig, model2d: VAEModel | None, stitched: np.ndarray,
                           targets: np.ndarray, state: TrainState | None = None,
                           emb: FeatureEmbedder | None = None) -> TrainState:
    """Fit the inflated decoder to map stitched latents back to their volumes."""
    if config.stage != "decoder_finetune":
        raise StageMismatchError(f"train_decoder_finetune got stage {config.stage!r}")
    st = state or new_decoder_finetune_state(config, model2d)
    stitched = np.asarray(stitched, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    k = st.model.config.per_axis
    if len(stitched) != len(targets):
        raise ShapeError(f"{len(stitched)} latents vs {len(targets)} targets")
    if stitched.ndim != 5 or stitched.shape[1] != st.model.config.latent_channels:
        raise ShapeError(f"stitched latents must be (n, C, h, w, d), got {stitched.shape}")
    expected = tuple(d * k for d in stitched.shape[2:])
    if targets.shape[2:] != expected:
        raise ShapeError(f"latents decode to {expected}, targets are {targets.shape[2:]}")
    emb = emb or _embedder(config)
    w = config.weights
    while st.step < config.steps:
        idx = _batch_indices(st, len(stitched))
        x_hat = st.model.decode(Tensor(stitched[idx]))
        target = Tensor(targets[idx])
        rec = nt.l1(x_hat, target)
        loss = rec * w.w_rec
        row = {"loss_rec": rec.item()}
        if w.w_perc:
            perc = per_slice_loss(lambda a, b: perceptual_loss(emb, a, b), target, x_hat)
            loss = loss + perc * w.w_perc
            row["loss_perc"] = perc.item()
        row["loss_total"] = loss.item()
        _check_finite(row["loss_total"], st.step)
        _gen_update(st, loss)
        _record(st, row)
    _finish(st)
    return st


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _finish(st: TrainState) -> None:
    if st.config.log_path:
        write_loss_log(st.config.log_path, st.log)
    if st.config.checkpoint_path:
        save_checkpoint(st, st.config.checkpoint_path)


def write_loss_log(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step",) + LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_COLUMNS])


def _opt_tensors(prefix: str, opt: AdamW | None) -> dict[str, np.ndarray]:
    if opt is None or not opt.state.m:
        return {}
    out = {}
    for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
        out[f"{prefix}.m.{i}"] = m
        out[f"{prefix}.v.{i}"] = v
    return out


def _opt_meta(opt: AdamW | None) -> dict | None:
    if opt is None:
        return None
    s = opt.state
    return {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "weight_decay": s.weight_decay, "t": s.t, "n": len(s.m)}


def _restore_opt(opt: AdamW, meta: dict, tensors: dict, prefix: str) -> None:
    s = opt.state
    s.lr, s.beta1, s.beta2, s.eps = meta["lr"], meta["beta1"], meta["beta2"], meta["eps"]
    s.weight_decay, s.t = meta["weight_decay"], meta["t"]
    s.m = [tensors[f"{prefix}.m.{i}"].copy() for i in range(meta["n"])]
    s.v = [tensors[f"{prefix}.v.{i}"].copy() for i in range(meta["n"])]
    if s.m and len(s.m) != len(opt.params):
        raise ckpt.CheckpointError("optimizer state does not match parameter list")


def encode_state(st: TrainState) -> bytes:
    tensors = {f"vae.{k}": v for k, v in st.model.state_dict().items()}
    if st.head is not None:
        tensors.update({f"head.{k}": v for k, v in st.head.state_dict().items()})
    if st.disc is not None:
        tensors.update({k: v for k, v in st.disc.state_dict().items()})
    tensors.update(_opt_tensors("opt_g", st.opt_g))
    tensors.update(_opt_tensors("opt_d", st.opt_d))
    frozen = [n for n, p in st.model.named_parameters() if not p.requires_grad]
    meta = {
        "kind": "train_state",
        "config": asdict(st.config),
        "step": st.step,
        "rng": st.rng.bit_generator.state,
        "log": st.log,
        "lora_rank": st.model.lora_rank,
        "frozen": frozen,
        "opt_g": _opt_meta(st.opt_g),
        "opt_d": _opt_meta(st.opt_d),
    }
    if st.head is not None:
        meta["head_hidden"] = int(st.head["head.conv1.weight"].shape[0])
    return ckpt.encode(st.model.config.checkpoint_fields(), tensors, meta)


def save_checkpoint(st: TrainState, path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    Path(tmp).write_bytes(encode_state(st))
    os.replace(tmp, path)


def decode_state(buf: bytes) -> TrainState:
    fields_, tensors, meta = ckpt.decode(buf)
    if meta.get("kind") != "train_state":
        model, head = model_from_parts(fields_, tensors, meta)
        cfg = TrainConfig(stage="s2_2d" if head is not None else "s1_2d")
        return TrainState(cfg, model, np.random.default_rng(0), head=head)
    cfg = TrainConfig(**meta["config"])
    model, head = model_from_parts(fields_, tensors, meta)
    for name in meta.get("frozen", []):
        model.params[name].requires_grad = False
    disc_state = {k: v for k, v in tensors.items() if k.startswith("disc.")}
    disc = None
    if disc_state:
        disc = Discriminator()
        disc.load_state_dict(disc_state)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    st = TrainState(cfg, model, rng, step=meta["step"], head=head, disc=disc, log=meta["log"])
    st.opt_g = _make_opt(cfg, [p for _, p in st.generator_params()])
    _restore_opt(st.opt_g, meta["opt_g"], tensors, "opt_g")
    if disc is not None:
        st.opt_d = _make_opt(cfg, disc.parameters())
        _restore_opt(st.opt_d, meta["opt_d"], tensors, "opt_d")
    return st


def load_checkpoint(path: str | os.PathLike, expect_ndim: int | None = None) -> TrainState:
    st = decode_state(Path(path).read_bytes())
    if expect_ndim is not None and st.model.config.ndim != expect_ndim:
        raise StageMismatchError(
            f"{path}: checkpoint holds a {st.model.config.ndim}D model, trainer needs {expect_ndim}D"
            + (" (inflate it first)" if expect_ndim == 3 else ""))
    return st


def resume(path: str | os.PathLike, data, emb: FeatureEmbedder | None = None,
           steps: int | None = None, targets=None, **overrides) -> TrainState:
    """Continue a saved run up to ``steps`` (default: the configured total).

    ``overrides`` replace bookkeeping fields such as ``log_path`` or
    ``checkpoint_path``; anything that changes the optimisation breaks the
    equivalence with an uninterrupted run.
    """
    st = load_checkpoint(path)
    if steps is not None:
        overrides["steps"] = steps
    if overrides:
        st.config = replace(st.config, **overrides)
    stage = st.config.stage
    if stage == "s1_2d":
        return train_stage1(st.config, None, data, state=st, emb=emb)
    if stage == "s2_2d":
        return train_stage2_2d(st.config, None, emb, data, state=st)
    if stage == "s2_3d":
        if st.model.config.ndim != 3:
            raise StageMismatchError("3D trainer handed a 2D checkpoint; inflate it first")
        return train_stage2_3d(st.config, None, data, state=st, emb=emb)
    return train_decoder_finetune(st.config, None, data, targets, state=st, emb=emb)
