"""Command-line entry point: ``medvae <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bn
from . import ndtensor as nt
from .baselines import baseline_downsize_roundtrip, per_axis_factor, stitch_2d_latents
from .evalsuite import (LabeledLatentDataset, ProbeBackbone, ProbeConfig, evaluate_reconstructions,
                        probe_protocol)
from .imageio import (generate_toy_dataset, load_any, load_dataset, read_manifest,
                      save_dataset, save_image2d, save_volume3d)
from .latentfile import read_latent, storage_ratio, write_latent
from .ndtensor import Tensor
from .training import (TrainConfig, frozen_latents, load_checkpoint, load_config, resume, train_decoder_finetune,
                       train_stage1, train_stage2_2d, train_stage2_3d)
from .vae import VAEModel, inflate_2d_to_3d, inflate_head, save_model

log = logging.getLogger("medvae")


class CliError(Exception):
    pass


def _load_split(manifest: str):
    return load_dataset(read_manifest(manifest))


def _load_model_any(path: str):
    """Model-only checkpoint or training checkpoint; returns (model, head)."""
    st = load_checkpoint(path)
    return st.model, st.head


def _config(args, stage: str) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig(stage=stage)
    if cfg.stage != stage:
        cfg = replace(cfg, stage=stage)
    over = {k: v for k, v in (("steps", args.steps), ("seed", args.seed)) if v is not None}
    if args.log:
        over["log_path"] = args.log
    cfg = replace(cfg, checkpoint_path=args.out, **over)
    return cfg


def _encode_array(model: VAEModel, head, x: np.ndarray, raw: bool) -> np.ndarray:
    with nt.no_grad():
        z = model.encode(Tensor(x[None])).mean
        if head is not None and not raw:
            z = head(z)
    return z.data[0]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    ds = generate_toy_dataset(args.kind, args.n, args.size, args.balance, args.seed, args.noise)
    m = save_dataset(ds, args.out, args.split)
    print(f"wrote {len(m.records)} samples to {args.out}/manifest.tsv")


def cmd_train_stage1(args) -> None:
    cfg = _config(args, "s1_2d")
    if args.resume:
        st = resume(args.resume, _load_split(args.data or cfg.train_manifest)[0], steps=cfg.steps,
                    checkpoint_path=cfg.checkpoint_path, log_path=cfg.log_path)
    else:
        data, _, _ = _load_split(args.data or cfg.train_manifest)
        st = train_stage1(cfg, None, data)
    print(f"stage 1: {st.step} steps, final L1 {st.log[-1]['loss_rec']:.5f} -> {args.out}")


def cmd_train_stage2_2d(args) -> None:
    cfg = _config(args, "s2_2d")
    base, _ = _load_model_any(args.base)
    data, _, _ = _load_split(args.data)
    st = train_stage2_2d(cfg, base, None, data)
    print(f"stage 2 (2D): {st.step} steps, emb loss {st.log[0]['loss_emb']:.5f} -> "
          f"{st.log[-1]['loss_emb']:.5f}")


def cmd_inflate_3d(args) -> None:
    model, head = _load_model_any(args.base)
    if model.config.ndim != 2:
        raise CliError(f"{args.base} is already 3D")
    m3 = inflate_2d_to_3d(model)
    save_model(args.out, m3, inflate_head(head) if head is not None else None,
               {"source": Path(args.base).name})
    print(f"inflated to 3D f={m3.config.f} -> {args.out}")


def cmd_train_stage2_3d(args) -> None:
    cfg = _config(args, "s2_3d")
    if args.target_f:
        cfg = replace(cfg, target_f=args.target_f)
    base, _ = _load_model_any(args.base)
    vols, _, _ = _load_split(args.data)
    st = train_stage2_3d(cfg, base, vols)
    print(f"stage 2 (3D): {st.step} steps, final L1 {st.log[-1]['loss_rec']:.5f}")


def cmd_decoder_finetune(args) -> None:
    cfg = _config(args, "decoder_finetune")
    base, _ = _load_model_any(args.base)
    vols, _, _ = _load_split(args.data)
    stitched = np.stack([stitch_2d_latents(base, v) for v in vols])
    st = train_decoder_finetune(cfg, base, stitched, vols)
    print(f"decoder fine-tune: {st.step} steps, final L1 {st.log[-1]['loss_rec']:.5f}")


def cmd_encode(args) -> None:
    model, head = _load_model_any(args.model)
    x = load_any(args.inp)
    z = _encode_array(model, head, x, args.raw)
    write_latent(args.out, z, model.config.f)
    print(f"latent {z.shape} -> {args.out} (storage ratio {storage_ratio(x.shape[1:], args.out):g})")


def decode_latent_array(model: VAEModel, z: np.ndarray) -> np.ndarray:
    with nt.no_grad():
        return model.decode(Tensor(np.asarray(z, dtype=np.float64)[None])).data[0]


def cmd_decode(args) -> None:
    model, _ = _load_model_any(args.model)
    z, meta = read_latent(args.inp)
    if meta.ndim != model.config.ndim or meta.f != model.config.f or meta.channels != model.config.latent_channels:
        raise CliError(f"latent (ndim={meta.ndim}, f={meta.f}, C={meta.channels}) does not fit "
                       f"model (ndim={model.config.ndim}, f={model.config.f}, "
                       f"C={model.config.latent_channels})")
    out = decode_latent_array(model, z)
    if args.out.endswith(".npy"):
        np.save(args.out, out)
    elif meta.ndim == 2:
        save_image2d(args.out, np.clip(out, 0.0, 1.0))
    else:
        save_volume3d(args.out, out)
    print(f"decoded {out.shape} -> {args.out}")


def _reconstruct(args, data: np.ndarray) -> np.ndarray:
    nd = data.ndim - 2
    if args.method in ("medvae", "vae"):
        model, _ = _load_model_any(args.model)
        with nt.no_grad():
            return np.concatenate([model.decode(model.encode(Tensor(data[i:i + 16])).mean).data
                                   for i in range(0, len(data), 16)])
    return baseline_downsize_roundtrip(data, args.method, args.f, nd)[1]


def cmd_baseline(args) -> None:
    x = load_any(args.inp)
    nd = x.ndim - 1
    low, rec = baseline_downsize_roundtrip(x, args.method, args.f, nd)
    np.save(args.out, low if args.low else rec)
    print(f"{args.method} f={args.f}: {x.shape} -> {low.shape} -> {args.out}")


def cmd_eval_recon(args) -> None:
    data, _, boxes = _load_split(args.data)
    rec = _reconstruct(args, data)
    names = [Path(r.path).name for r in read_manifest(args.data).records]
    has_boxes = any(boxes)
    report = evaluate_reconstructions(data, rec, data.ndim - 2, args.seed, names,
                                      boxes if has_boxes else None)
    report.write_csv(args.out)
    print(report.summary())


def _probe_inputs(args, data: np.ndarray) -> np.ndarray:
    if args.method == "image":
        return data
    if args.method in ("medvae", "vae"):
        model, head = _load_model_any(args.model)
        if model.config.ndim != data.ndim - 2:
            raise CliError(f"{model.config.ndim}D model cannot encode {data.ndim - 2}D samples")
        z = frozen_latents(model, data)
        if head is not None and not args.raw:
            with nt.no_grad():
                z = head(Tensor(z)).data
        return z
    if args.method == "stitched":
        model, head = _load_model_any(args.model)
        return np.stack([stitch_2d_latents(model, v, head=None if args.raw else head) for v in data])
    return baseline_downsize_roundtrip(data, args.method, args.f, data.ndim - 2)[0]


def _probe_cfg(args) -> ProbeConfig:
    return ProbeConfig(epochs=args.epochs, lr=args.lr, weighted_sampling=args.weighted)


def cmd_eval_probe(args) -> None:
    tr, ytr, _ = _load_split(args.train)
    te, yte, _ = _load_split(args.test)
    train = LabeledLatentDataset.from_latents(_probe_inputs(args, tr), ytr, "train")
    test = LabeledLatentDataset.from_latents(_probe_inputs(args, te), yte, "test")
    rep = probe_protocol(_probe_cfg(args), train, test, args.seeds, name=args.method)
    rep.write_csv(args.out)
    print(f"{args.method}: AUROC {rep.mean:.4f} +- {rep.std:.4f} over seeds {args.seeds}")


def cmd_bench(args) -> None:
    backbone = ProbeBackbone()
    full = tuple(args.dims)
    nd = len(full)
    reports = []
    for f in args.factors:
        k = 1 if f == 1 else per_axis_factor(f, nd)
        dims = tuple(d // k for d in full)
        r = bn.bench_forward(backbone, dims, args.batch, args.reps, args.warmup,
                             model_id=f"probe_f{f}")
        r.max_batch = bn.bench_max_batch(bn.probe_footprint(backbone, dims), args.budget)
        r.storage_original_bytes = bn.source_bytes(full)
        r.storage_latent_bytes = bn.source_bytes(dims)
        reports.append(r)
        print(f"f={f:<4} dims={dims} latency {r.latency_ms:.2f} ms, throughput "
              f"{r.throughput:.1f}/s, max batch {r.max_batch}")
    bn.write_reports(args.out, reports)


def cmd_ablate(args) -> None:
    """Stage-1-only vs Stage-2 latents under one probe and seed set.

    One row per method, one ``{task}_mean``/``{task}_std`` column pair per
    train/test manifest pair (task = ``--tasks`` entry, else the train
    manifest's directory name).
    """
    if len(args.train) != len(args.test):
        raise CliError(f"{len(args.train)} --train manifests vs {len(args.test)} --test manifests")
    names = args.tasks or [Path(tr).parent.name or f"task{i}" for i, tr in enumerate(args.train)]
    if len(names) != len(args.train):
        raise CliError(f"{len(names)} --tasks names for {len(args.train)} manifest pairs")
    tasks = [(name, _load_split(tr), _load_split(te))
             for name, tr, te in zip(names, args.train, args.test)]
    if len({t[0] for t in tasks}) != len(tasks):
        raise CliError("task names must be distinct; pass --tasks")
    cfg = _probe_cfg(args)
    rows = []
    for label, path in (("stage1", args.stage1), ("stage2", args.stage2)):
        model, head = _load_model_any(path)
        use_head = head if label == "stage2" else None
        row = {"method": label, "f": model.config.f, "C": model.config.latent_channels}
        means = []
        for task, (tr, ytr, _), (te, yte, _) in tasks:
            inputs = []
            for data in (tr, te):
                z = frozen_latents(model, data)
                if use_head is not None:
                    with nt.no_grad():
                        z = use_head(Tensor(z)).data
                inputs.append(z)
            rep = probe_protocol(cfg, LabeledLatentDataset.from_latents(inputs[0], ytr),
                                 LabeledLatentDataset.from_latents(inputs[1], yte), args.seeds, label)
            row[f"{task}_mean"], row[f"{task}_std"] = rep.mean, rep.std
            means.append(rep.mean)
            print(f"{label} {task}: AUROC {rep.mean:.4f} +- {rep.std:.4f}")
        row["avg"] = float(np.mean(means))
        row["seeds"] = " ".join(map(str, args.seeds))
        rows.append(row)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _train_args(p, base: bool = True) -> None:
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--data", help="dataset manifest.tsv")
    if base:
        p.add_argument("--base", required=True, help="checkpoint to start from")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="loss-log CSV")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)


def _probe_args(p, many: bool = False) -> None:
    nargs = "+" if many else None
    p.add_argument("--train", required=True, nargs=nargs, help="training manifest")
    p.add_argument("--test", required=True, nargs=nargs, help="test manifest")
    p.add_argument("--out", required=True, help="AUROC CSV")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weighted", action="store_true", help="inverse-frequency class sampling")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="medvae", description="Medical image autoencoder toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic labelled corpus")
    p.add_argument("--kind", default="blob2d", choices=("blob2d", "ring2d", "sphere3d", "plane3d"))
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--balance", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="train a 2D base autoencoder")
    _train_args(p, base=False)
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2-2d", help="fit the latent projection head")
    _train_args(p)
    p.set_defaults(func=cmd_train_stage2_2d)

    p = sub.add_parser("inflate-3d", help="inflate a 2D checkpoint to 3D")
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inflate_3d)

    p = sub.add_parser("train-stage2-3d", help="fine-tune an inflated model on 3D patches")
    _train_args(p)
    p.add_argument("--target-f", type=int, default=0)
    p.set_defaults(func=cmd_train_stage2_3d)

    p = sub.add_parser("decoder-finetune", help="train a 3D decoder on stitched 2D latents")
    _train_args(p)
    p.set_defaults(func=cmd_decoder_finetune)

    p = sub.add_parser("encode", help="image/volume -> latent file")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true", help="skip the projection head")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="latent file -> image/volume (.pgm, .mvv or .npy)")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("baseline", help="interpolation down/up-size one file (.npy out)")
    p.add_argument("--method", required=True)
    p.add_argument("--f", type=int, required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--low", action="store_true", help="save the low-resolution array instead")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval-recon", help="per-sample PSNR / MS-SSIM CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, help="medvae, nearest, bilinear, bicubic, ...")
    p.add_argument("--model")
    p.add_argument("--f", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("eval-probe", help="linear-probe AUROC over seeds")
    _probe_args(p)
    p.add_argument("--method", default="image",
                   help="image, medvae, stitched, or an interpolation method")
    p.add_argument("--model")
    p.add_argument("--f", type=int, default=16)
    p.add_argument("--raw", action="store_true", help="skip the projection head")
    p.set_defaults(func=cmd_eval_probe)

    p = sub.add_parser("bench", help="probe latency / throughput / max batch sweep")
    p.add_argument("--dims", type=int, nargs="+", default=[256, 256])
    p.add_argument("--factors", type=int, nargs="+", default=[1, 16, 64])
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--budget", type=int, default=2**30, help="memory budget in bytes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="stage-1-only vs stage-2 latent probes")
    _probe_args(p, many=True)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--stage2", required=True, help="stage-2 checkpoint (with head)")
    p.add_argument("--tasks", nargs="+", help="column names, one per manifest pair")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"medvae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
