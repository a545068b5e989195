"""Convolutional 2D/3D VAE, projection head, LoRA adapters and kernel inflation.

Encoder: ``conv_in`` then, per stage, two residual blocks (GroupNorm,
nonlinearity, 3x3 conv, twice) and a stride-2 3x3 conv; a final
norm/nonlinearity/conv emits ``2*C`` channels split into mean and log-variance.
The decoder mirrors it with nearest-neighbour x2 upsampling followed by a 3x3
conv (or a stride-2 transposed conv when ``upsample="transpose"``).
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable

import numpy as np

from . import checkpoint as ckpt
from . import ndtensor as nt
from .ndtensor import ShapeError, Tensor

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


def _integer_root(f: int, degree: int) -> int | None:
    r = round(f ** (1.0 / degree))
    for cand in (r - 1, r, r + 1):
        if cand >= 1 and cand**degree == f:
            return cand
    return None


@dataclass(frozen=True)
class VAEConfig:
    ndim: int = 2
    f: int = 16
    latent_channels: int = 1
    width: int = 32
    groups: int = 8
    nonlinearity: str = "silu"
    upsample: str = "nearest"

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {self.ndim}")
        root = _integer_root(self.f, self.ndim)
        if root is None or root & (root - 1):
            kind = "square" if self.ndim == 2 else "cube"
            raise ValueError(f"f={self.f}: per-axis factor ({kind} root) must be a power of 2")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.width % self.groups:
            raise ValueError(f"width {self.width} not divisible by groups {self.groups}")
        if self.nonlinearity not in ("silu", "leaky_relu"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.upsample not in ("nearest", "transpose"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    @property
    def per_axis(self) -> int:
        return _integer_root(self.f, self.ndim)

    @property
    def stages(self) -> int:
        return int(math.log2(self.per_axis))

    def checkpoint_fields(self) -> dict:
        return {**asdict(self), "stages": self.stages}

    @classmethod
    def from_checkpoint_fields(cls, fields: dict) -> VAEConfig:
        cfg = cls(**{k: v for k, v in fields.items() if k != "stages"})
        if cfg.stages != fields["stages"]:
            raise ckpt.CheckpointError(
                f"stage count {fields['stages']} inconsistent with f={cfg.f}")
        return cfg


def latent_shape(config: VAEConfig, dims: Iterable[int]) -> tuple[int, ...]:
    """Spatial extents divided by the per-axis factor, with ``C`` appended."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != config.ndim:
        raise ShapeError(f"expected {config.ndim} spatial extents, got {dims}")
    k = config.per_axis
    for ax, d in enumerate(dims):
        if d % k:
            raise ShapeError(f"spatial axis {ax}: extent {d} not divisible by {k}")
    return tuple(d // k for d in dims) + (config.latent_channels,)


@dataclass
class LatentDist:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(f"mean {self.mean.shape} vs logvar {self.logvar.shape}")

    @property
    def std(self) -> Tensor:
        return nt.exp(self.logvar * 0.5)


def reparameterize(dist: LatentDist, seed: int | np.random.Generator | None = None,
                   deterministic: bool = False) -> Tensor:
    """``mean + exp(logvar / 2) * eps`` with seeded standard-normal ``eps``."""
    if deterministic:
        return dist.mean
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(dist.mean.shape)
    return dist.mean + dist.std * Tensor(eps)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int, nd: int):
    fan_in = c_in * k**nd
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in) + (k,) * nd)
    b = rng.uniform(-bound, bound, size=(c_out,))
    return w, b


class ParamSet:
    """Ordered name -> Tensor mapping shared by every model here."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> None:
        self.params[name] = Tensor(value, requires_grad=requires_grad, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.params.items() if k.startswith(prefix)]

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [v for _, v in self.named_parameters(prefix)]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def set_requires_grad(self, flag: bool, prefix: str = "") -> None:
        for _, p in self.named_parameters(prefix):
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ckpt.CheckpointError(
                f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ckpt.CheckpointError(
                    f"{k}: shape {v.shape} does not match {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable() if trainable_only else self.params.values()
        return sum(p.size for p in ps)

    def digest(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class VAEModel(ParamSet):
    """Encoder ``g`` (params under ``enc.``) and decoder ``h`` (``dec.``)."""

    def __init__(self, config: VAEConfig, seed: int = 0, zero_init_out: bool = False):
        super().__init__()
        self.config = config
        self.lora_rank = 0
        self.lora_skipped: list[str] = []
        self.conv_names: list[str] = []
        rng = np.random.default_rng(seed)
        w, c, nd = config.width, config.latent_channels, config.ndim

        def conv(name, cin, cout, k=3):
            wt, b = _conv_init(rng, cout, cin, k, nd)
            self.add(f"{name}.weight", wt)
            self.add(f"{name}.bias", b)
            self.conv_names.append(name)

        def norm(name, ch):
            self.add(f"{name}.weight", np.ones(ch))
            self.add(f"{name}.bias", np.zeros(ch))

        def block(name):
            norm(f"{name}.norm1", w)
            conv(f"{name}.conv1", w, w)
            norm(f"{name}.norm2", w)
            conv(f"{name}.conv2", w, w)

        conv("enc.conv_in", 1, w)
        for s in range(config.stages):
            block(f"enc.s{s}.b0")
            block(f"enc.s{s}.b1")
            conv(f"enc.s{s}.down", w, w)
        norm("enc.norm_out", w)
        conv("enc.conv_out", w, 2 * c)
        if zero_init_out:
            self.params["enc.conv_out.weight"].data[:] = 0.0
            self.params["enc.conv_out.bias"].data[:] = 0.0

        conv("dec.conv_in", c, w)
        for s in range(config.stages):
            if config.upsample == "transpose":
                # kernel laid out as for the adjoint conv: (C_a, C_b, k...)
                wt, b = _conv_init(rng, w, w, 3, nd)
                self.add(f"dec.s{s}.up.weight", wt)
                self.add(f"dec.s{s}.up.bias", b)
                self.conv_names.append(f"dec.s{s}.up")
            else:
                conv(f"dec.s{s}.up", w, w)
            block(f"dec.s{s}.b0")
            block(f"dec.s{s}.b1")
        norm("dec.norm_out", w)
        conv("dec.conv_out", w, 1)

    # -- layers ------------------------------------------------------------
    def kernel(self, name: str) -> Tensor:
        w = self.params[f"{name}.weight"]
        a = self.params.get(f"{name}.lora_A")
        if a is None:
            return w
        b = self.params[f"{name}.lora_B"]
        return w + nt.reshape(b @ a, w.shape)

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        k = self.kernel(name)
        pad = k.shape[-1] // 2
        return nt.conv(x, k, self.params[f"{name}.bias"], stride=stride, padding=pad)

    def _act(self, x: Tensor) -> Tensor:
        if self.config.nonlinearity == "silu":
            return nt.silu(x)
        return nt.leaky_relu(x, 0.2)

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return nt.group_norm(x, self.config.groups, self.params[f"{name}.weight"],
                             self.params[f"{name}.bias"])

    def _block(self, name: str, x: Tensor) -> Tensor:
        h = self._conv(f"{name}.conv1", self._act(self._norm(f"{name}.norm1", x)))
        h = self._conv(f"{name}.conv2", self._act(self._norm(f"{name}.norm2", h)))
        return x + h

    def _up(self, s: int, x: Tensor) -> Tensor:
        name = f"dec.s{s}.up"
        if self.config.upsample == "transpose":
            return nt.conv_transpose(x, self.kernel(name), self.params[f"{name}.bias"],
                                     stride=2, padding=1, output_padding=1)
        return self._conv(name, nt.upsample_nearest(x, 2))

    # -- public API --------------------------------------------------------
    def check_input(self, x: Tensor) -> None:
        nd = self.config.ndim
        if x.ndim != nd + 2 or x.shape[1] != 1:
            raise ShapeError(f"expected input (N, 1, {nd} spatial axes), got {x.shape}")
        latent_shape(self.config, x.shape[2:])

    def encode(self, x) -> LatentDist:
        x = nt._as_tensor(x)
        self.check_input(x)
        h = self._conv("enc.conv_in", x)
        for s in range(self.config.stages):
            h = self._block(f"enc.s{s}.b0", h)
            h = self._block(f"enc.s{s}.b1", h)
            h = self._conv(f"enc.s{s}.down", h, stride=2)
        h = self._conv("enc.conv_out", self._act(self._norm("enc.norm_out", h)))
        c = self.config.latent_channels
        mean = h[:, :c]
        logvar = nt.clamp(h[:, c:], LOGVAR_MIN, LOGVAR_MAX)
        return LatentDist(mean, logvar)

    def decode(self, z) -> Tensor:
        z = nt._as_tensor(z)
        nd, c = self.config.ndim, self.config.latent_channels
        if z.ndim != nd + 2 or z.shape[1] != c:
            raise ShapeError(f"latent must be (N, {c}, {nd} spatial axes), got {z.shape}")
        h = self._conv("dec.conv_in", z)
        for s in range(self.config.stages):
            h = self._up(s, h)
            h = self._block(f"dec.s{s}.b0", h)
            h = self._block(f"dec.s{s}.b1", h)
        return self._conv("dec.conv_out", self._act(self._norm("dec.norm_out", h)))

    def forward(self, x, seed=None, deterministic: bool = False):
        dist = self.encode(x)
        z = reparameterize(dist, seed, deterministic)
        return self.decode(z), dist

    def clone(self) -> VAEModel:
        return copy.deepcopy(self)


def encode(model: VAEModel, x) -> LatentDist:
    return model.encode(x)


def decode(model: VAEModel, z) -> Tensor:
    return model.decode(z)


# ---------------------------------------------------------------------------
# projection head
# ---------------------------------------------------------------------------

class ProjectionHead(ParamSet):
    """Residual ``z + conv2(silu(conv1(z)))`` with ``conv2`` zero-initialised."""

    def __init__(self, channels: int, ndim: int = 2, hidden: int = 16, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.ndim = ndim
        rng = np.random.default_rng(seed)
        w, b = _conv_init(rng, hidden, channels, 3, ndim)
        self.add("head.conv1.weight", w)
        self.add("head.conv1.bias", b)
        self.add("head.conv2.weight", np.zeros((channels, hidden) + (3,) * ndim))
        self.add("head.conv2.bias", np.zeros(channels))

    def __call__(self, z) -> Tensor:
        z = nt._as_tensor(z)
        if z.ndim != self.ndim + 2 or z.shape[1] != self.channels:
            raise ShapeError(
                f"head expects (N, {self.channels}, {self.ndim} spatial axes), got {z.shape}")
        h = nt.silu(nt.conv(z, self["head.conv1.weight"], self["head.conv1.bias"], padding=1))
        return z + nt.conv(h, self["head.conv2.weight"], self["head.conv2.bias"], padding=1)


def project_latent(head: ProjectionHead, z) -> Tensor:
    return head(z)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

def _fans(w: np.ndarray) -> tuple[int, int]:
    return int(np.prod(w.shape[1:])), int(w.shape[0])


def apply_lora(model: VAEModel, rank: int = 4, layers: Iterable[str] | None = None,
               seed: int = 0) -> VAEModel:
    """Return a copy with frozen base weights and trainable low-rank adapters.

    ``A`` (rank x fan_in) is drawn uniformly, ``B`` (fan_out x rank) starts at
    zero so the adapted model initially computes exactly the base model. With
    ``layers=None`` every conv is targeted; convs too narrow for ``rank``
    (``rank > min(fan_in, fan_out)``, e.g. the 1-channel output conv) are left
    unadapted and listed in ``lora_skipped``. Naming such a conv explicitly
    raises ``ValueError``.
    """
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    if model.lora_rank:
        raise ValueError("model already carries LoRA adapters")
    out = model.clone()
    rng = np.random.default_rng(seed)
    explicit = layers is not None
    targets = list(layers) if explicit else list(out.conv_names)
    out.set_requires_grad(False)
    out.lora_skipped = []
    for name in targets:
        if name not in out.conv_names:
            raise KeyError(f"no conv layer named {name!r}")
        w = out.params[f"{name}.weight"].data
        fan_in, fan_out = _fans(w)
        if rank > min(fan_in, fan_out):
            if explicit:
                raise ValueError(f"{name}: rank {rank} exceeds min(fan_in={fan_in}, fan_out={fan_out})")
            out.lora_skipped.append(name)
            continue
        bound = 1.0 / math.sqrt(fan_in)
        out.add(f"{name}.lora_A", rng.uniform(-bound, bound, size=(rank, fan_in)))
        out.add(f"{name}.lora_B", np.zeros((fan_out, rank)))
    out.lora_rank = rank
    return out


def lora_parameter_count(model: VAEModel) -> int:
    return sum(p.size for n, p in model.params.items() if ".lora_" in n)


def merge_lora(model: VAEModel) -> VAEModel:
    """Fold ``B @ A`` into each kernel and drop the adapters."""
    out = model.clone()
    for name in out.conv_names:
        a = out.params.pop(f"{name}.lora_A", None)
        if a is None:
            continue
        b = out.params.pop(f"{name}.lora_B")
        w = out.params[f"{name}.weight"]
        w.data = w.data + (b.data @ a.data).reshape(w.shape)
    out.lora_rank = 0
    out.lora_skipped = []
    out.set_requires_grad(True)
    return out


# ---------------------------------------------------------------------------
# 2D -> 3D inflation
# ---------------------------------------------------------------------------

def inflate_kernel(w: np.ndarray) -> np.ndarray:
    """``(O, I, k, k)`` -> ``(O, I, k, k, k)`` with the 2D weights on the centre depth slice."""
    k = w.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"cannot centre an even kernel extent {k}")
    out = np.zeros(w.shape + (k,))
    out[..., k // 2] = w
    return out


def inflate_2d_to_3d(model2d: VAEModel) -> VAEModel:
    if model2d.config.ndim != 2:
        raise ValueError("inflation needs a 2D model")
    src = merge_lora(model2d) if model2d.lora_rank else model2d
    cfg = replace(src.config, ndim=3, f=src.config.per_axis**3)
    out = VAEModel(cfg)
    state = {}
    for name, p in src.params.items():
        state[name] = inflate_kernel(p.data) if p.ndim == 4 else p.data.copy()
    out.load_state_dict(state)
    return out


def inflate_head(head: ProjectionHead) -> ProjectionHead:
    if head.ndim != 2:
        raise ValueError("inflation needs a 2D head")
    hidden = head["head.conv1.weight"].shape[0]
    out = ProjectionHead(head.channels, ndim=3, hidden=hidden)
    out.load_state_dict({k: inflate_kernel(v.data) if v.ndim == 4 else v.data.copy()
                         for k, v in head.params.items()})
    return out


# ---------------------------------------------------------------------------
# model-only checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: VAEModel, head: ProjectionHead | None = None, meta: dict | None = None) -> None:
    tensors = {f"vae.{k}": v for k, v in model.state_dict().items()}
    if head is not None:
        tensors.update({f"head.{k}": v for k, v in head.state_dict().items()})
    info = {"kind": "model", "lora_rank": model.lora_rank, "lora_skipped": model.lora_skipped}
    if head is not None:
        info["head_hidden"] = int(head["head.conv1.weight"].shape[0])
    info.update(meta or {})
    ckpt.write(path, model.config.checkpoint_fields(), tensors, info)


def model_from_parts(fields: dict, tensors: dict, meta: dict):
    cfg = VAEConfig.from_checkpoint_fields(fields)
    model = VAEModel(cfg)
    vae_state = {k[4:]: v for k, v in tensors.items() if k.startswith("vae.")}
    rank = int(meta.get("lora_rank", 0))
    if rank:
        model = apply_lora(model, rank)
    model.load_state_dict(vae_state)
    head = None
    head_state = {k[5:]: v for k, v in tensors.items() if k.startswith("head.")}
    if head_state:
        head = ProjectionHead(cfg.latent_channels, cfg.ndim, int(meta["head_hidden"]))
        head.load_state_dict(head_state)
    return model, head


def load_model(path) -> tuple[VAEModel, ProjectionHead | None]:
    fields, tensors, meta = ckpt.read(path)
    return model_from_parts(fields, tensors, meta)
