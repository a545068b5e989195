"""End-to-end acceptance checks, one per criterion.

Each check prints a single ``[PASS]``/``[FAIL]`` line (visible with ``pytest -s``
or when run as a script) and then asserts. Run standalone with
``python tests/test_acceptance.py``.
"""

import csv
import math
import os
import sys
import time
import zlib

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from conftest import gradcheck  # noqa: E402
from test_evalsuite import pair_auroc, ref_ms_ssim  # noqa: E402
from test_losses import LOSS_GRAD_CASES  # noqa: E402
from test_ndtensor import GRAD_CASES  # noqa: E402

from medvae import cli, ndtensor as nt  # noqa: E402
from medvae.bench import bench_forward, bench_max_batch, probe_footprint  # noqa: E402
from medvae.checkpoint import decode, encode  # noqa: E402
from medvae.evalsuite import (LabeledLatentDataset, ProbeBackbone, ProbeConfig, auroc,  # noqa: E402
                              macro_auroc, ms_ssim, probe_protocol, psnr, weighted_sample_indices)
from medvae.imageio import generate_toy_dataset, load_any  # noqa: E402
from medvae.interp import resize_array  # noqa: E402
from medvae.latentfile import decode_latent, encode_latent, storage_ratio  # noqa: E402
from medvae.losses import FeatureEmbedder, LossWeights, embedding_consistency, stage1_total  # noqa: E402
from medvae.ndtensor import Tensor  # noqa: E402
from medvae.training import (TrainConfig, new_stage1_state, new_stage2_2d_state, save_checkpoint,  # noqa: E402
                             stage2_2d_loss, stage2_3d_loss, train_stage1, train_stage2_2d)
from medvae.vae import (VAEConfig, VAEModel, apply_lora, inflate_2d_to_3d, inflate_kernel,  # noqa: E402
                        latent_shape, lora_parameter_count, merge_lora)

SIX_CONFIGS = [(2, 16, 1), (2, 16, 3), (2, 64, 1), (2, 64, 4), (3, 64, 1), (3, 512, 1)]


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()
    return ok


# ---------------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for name, (shapes, fn) in GRAD_CASES.items():
        worst = max(worst, gradcheck(fn, shapes, probes=20, seed=zlib.crc32(name.encode()) % 1000))
    for name, (shapes, fn) in LOSS_GRAD_CASES.items():
        worst = max(worst, gradcheck(fn, shapes, probes=20, scale=0.5))
    elapsed = time.perf_counter() - t0
    n = len(GRAD_CASES) + len(LOSS_GRAD_CASES)
    return worst <= 1e-4 and elapsed < 120, f"{n} gradient checks, worst rel err {worst:.2e}, {elapsed:.1f}s"


def criterion_2():
    expected = {(2, 16): (16, 16), (2, 64): (8, 8), (3, 64): (16, 16, 16), (3, 512): (8, 8, 8)}
    ok = True
    for nd, f, c in SIX_CONFIGS:
        dims = (64,) * nd
        ok &= latent_shape(VAEConfig(nd, f, c), dims) == expected[(nd, f)] + (c,)
        model = VAEModel(VAEConfig(nd, f, c, width=8, groups=4), seed=0)
        x = np.random.default_rng(0).random((1, 1) + (16,) * nd)
        with nt.no_grad():
            x_hat, dist = model.forward(Tensor(x), deterministic=True)
        ok &= x_hat.shape == x.shape and dist.mean.shape[1] == c
    r64 = storage_ratio((64, 64), encode_latent(np.zeros((1, 8, 8)), 64))
    r512 = storage_ratio((64, 64, 64), encode_latent(np.zeros((1, 8, 8, 8)), 512))
    ok &= r64 == 64.0 and r512 == 512.0
    return ok, f"six configs shaped and round-tripped; storage ratios {r64} and {r512}"


def criterion_3():
    data = generate_toy_dataset("blob2d", 16, 32, seed=0).images
    cfg = TrainConfig(steps=10, adv_start_step=3125, width=8, groups=4)
    fresh = new_disc_state(cfg)
    st = train_stage1(cfg, None, data)
    same = all(st.disc.state_dict()[k].tobytes() == v.tobytes() for k, v in fresh.items())
    no_grad = all(p.grad is None for p in st.disc.parameters())
    return same and no_grad, f"discriminator bit-unchanged after {st.step} steps: {same}, no gradients: {no_grad}"


def new_disc_state(cfg):
    return {k: v.copy() for k, v in new_stage1_state(cfg).disc.state_dict().items()}


def criterion_4():
    t0 = time.perf_counter()
    train = generate_toy_dataset("blob2d", 200, 32, 0.5, seed=1).images
    test = generate_toy_dataset("blob2d", 100, 32, 0.5, seed=2).images
    st = train_stage1(TrainConfig(steps=300, lr=1e-3, width=32, groups=8, seed=0), None, train)
    l1 = [r["loss_rec"] for r in st.log]
    drop = 1 - np.mean(l1[-10:]) / l1[0]
    with nt.no_grad():
        recon = st.model.decode(st.model.encode(Tensor(test)).mean).data
    vae_psnr = np.mean([psnr(a, b) for a, b in zip(test, recon)])
    bicubic = resize_array(resize_array(test, (8, 8), "bicubic"), (32, 32), "bicubic")
    bic_psnr = np.mean([psnr(a, b) for a, b in zip(test, bicubic)])
    elapsed = time.perf_counter() - t0
    ok = drop >= 0.5 and vae_psnr > bic_psnr and elapsed <= 600
    return ok, (f"L1 {l1[0]:.4f} -> {np.mean(l1[-10:]):.4f} ({drop:.0%} drop); held-out PSNR "
                f"{vae_psnr:.2f} dB vs bicubic {bic_psnr:.2f} dB; {elapsed:.0f}s")


def criterion_5():
    data = generate_toy_dataset("blob2d", 32, 32, seed=3).images
    base = VAEModel(VAEConfig(2, 16, 1, width=8, groups=4), seed=0)
    before = base.digest()
    cfg = TrainConfig(stage="s2_2d", steps=200, lr=1e-3, width=8, groups=4)
    emb = FeatureEmbedder((32, 32))
    st0 = new_stage2_2d_state(cfg, base)
    x = Tensor(data)
    z = base.encode(x).mean
    identity = st0.head(z).data.tobytes() == z.data.tobytes()
    loss0 = stage2_2d_loss(st0.head, emb, x, z).item()
    st = train_stage2_2d(cfg, base, emb, data)
    loss200 = stage2_2d_loss(st.head, emb, x, z).item()
    hash_ok = st.model.digest() == before == base.digest()
    ok = hash_ok and identity and loss200 < loss0 and loss0 == embedding_consistency(emb, x, z).item()
    return ok, f"hash invariant {hash_ok}, identity head {identity}, loss {loss0:.4f} -> {loss200:.4f}"


def criterion_6():
    r = np.random.default_rng(6)
    w, b = r.normal(size=(4, 2, 3, 3)), r.normal(size=4)
    sl = r.normal(size=(1, 2, 10, 10))
    vol = np.repeat(sl[..., None], 6, axis=-1)
    out2 = nt.conv(Tensor(sl), Tensor(w), Tensor(b), padding=1).data
    out3 = nt.conv(Tensor(vol), Tensor(inflate_kernel(w)), Tensor(b), padding=1).data
    conv_err = max(np.max(np.abs(out3[..., s] - out2)) for s in range(1, 5))
    base = VAEModel(VAEConfig(2, 16, 1, width=8, groups=4), seed=2)
    emb = FeatureEmbedder((16, 16))
    img = generate_toy_dataset("blob2d", 2, 16, seed=4).images[1:]
    w8 = LossWeights()
    loss3, _, _ = stage2_3d_loss(inflate_2d_to_3d(base), emb, None, w8, np.repeat(img[..., None], 8, -1), 0,
                                 deterministic=True)
    x_hat, dist = base.forward(Tensor(img), deterministic=True)
    loss2, _ = stage1_total(LossWeights(w_emb=0.0), Tensor(img), x_hat, dist, 0, emb=emb)
    loss_err = abs(loss3.item() - loss2.item())
    return conv_err <= 1e-10 and loss_err <= 1e-6, f"conv |d| {conv_err:.1e}, step-0 loss |d| {loss_err:.1e}"


def criterion_7():
    r = np.random.default_rng(7)
    base = VAEModel(VAEConfig(2, 16, 1, width=8, groups=4), seed=0)
    x = Tensor(r.random((2, 1, 16, 16)))
    lora = apply_lora(base, 4, seed=1)
    noop = (lora.forward(x, deterministic=True)[0].data.tobytes()
            == base.forward(x, deterministic=True)[0].data.tobytes())
    for name, p in lora.named_parameters():
        if name.endswith("lora_B"):
            p.data[:] = r.normal(size=p.shape) * 0.1
    merge_err = np.max(np.abs(merge_lora(lora).forward(x, deterministic=True)[0].data
                              - lora.forward(x, deterministic=True)[0].data))
    expected = 0
    for name in base.conv_names:
        wt = base[f"{name}.weight"].data
        fan_in, fan_out = int(np.prod(wt.shape[1:])), wt.shape[0]
        if 4 <= min(fan_in, fan_out):
            expected += 4 * (fan_in + fan_out)
    count_ok = lora_parameter_count(lora) == expected == lora.num_parameters(trainable_only=True)
    return noop and merge_err <= 1e-10 and count_ok, (
        f"no-op {noop}, merge |d| {merge_err:.1e}, trainable {lora_parameter_count(lora)} == {expected}")


def criterion_8():
    r = np.random.default_rng(8)
    psnr_err = ms_err = 0.0
    auroc_exact = macro_exact = True
    for _ in range(10):
        a, b = r.random((48, 48)), r.random((48, 48))
        mse = ((a - b) ** 2).sum() / a.size
        psnr_err = max(psnr_err, abs(psnr(a, b) - 10 * math.log10(1 / mse)))
        b = np.clip(a + r.normal(0, 0.1, a.shape), 0, 1)
        ms_err = max(ms_err, abs(ms_ssim(a, b) - ref_ms_ssim(a, b, 3)))
        y = r.permutation(np.r_[0, 1, r.integers(0, 2, 28)])
        s = np.round(r.random(30), 1)
        auroc_exact &= auroc(s, y) == pair_auroc(s, y)
        y3 = r.permutation(np.r_[0, 1, 2, r.integers(0, 3, 27)])
        s3 = np.round(r.random((30, 3)), 1)
        macro_exact &= macro_auroc(s3, y3) == np.mean([pair_auroc(s3[:, k], (y3 == k).astype(int))
                                                       for k in range(3)])
    example = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = psnr_err <= 1e-10 and ms_err <= 1e-6 and auroc_exact and macro_exact and example == 0.75
    return ok, (f"PSNR |d| {psnr_err:.1e}, MS-SSIM |d| {ms_err:.1e}, AUROC exact {auroc_exact}, "
                f"macro exact {macro_exact}, example {example}")


def _shift(n, seed):
    r = np.random.default_rng(seed)
    y = r.permutation(np.arange(n) % 2)
    return r.normal(0, 0.3, (n, 1, 8, 8)) + 2.0 * y[:, None, None, None], y


def criterion_9():
    xtr, ytr = _shift(80, 0)
    xte, yte = _shift(80, 1)
    cfg = ProbeConfig()
    sep = probe_protocol(cfg, LabeledLatentDataset.from_latents(xtr, ytr),
                         LabeledLatentDataset.from_latents(xte, yte))
    xtr, ytr = _shift(200, 2)
    xte, yte = _shift(400, 3)
    r = np.random.default_rng(9)
    shuf = probe_protocol(cfg, LabeledLatentDataset.from_latents(xtr, r.permutation(ytr)),
                          LabeledLatentDataset.from_latents(xte, r.permutation(yte)))
    labels = np.r_[np.zeros(900, int), np.ones(100, int)]
    n = 20_000
    frac = labels[weighted_sample_indices(labels, n, np.random.default_rng(0))].mean()
    sigma = math.sqrt(0.25 / n)
    ok = sep.values == [1.0] * 3 and all(0.4 <= v <= 0.6 for v in shuf.values) and abs(frac - 0.5) <= 3 * sigma
    return ok, (f"separable {sep.mean:.3f} +- {sep.std:.3f}; shuffled {np.round(shuf.values, 3).tolist()}; "
                f"9:1 sampler minority share {frac:.4f} (3 sigma = {3 * sigma:.4f})")


def criterion_10():
    bb = ProbeBackbone()
    dims = {1: (256, 256), 16: (64, 64), 64: (32, 32)}
    reps = {f: bench_forward(bb, d, batch=8, repetitions=5, warmup=2, model_id=f"f{f}") for f, d in dims.items()}
    mb = {f: bench_max_batch(probe_footprint(bb, d), 2**30) for f, d in dims.items()}
    lat = {f: r.latency_ms for f, r in reps.items()}
    ident = all(abs(r.throughput * r.latency_s - r.batch) <= r.tolerance for r in reps.values())
    ok = lat[64] < lat[16] < lat[1] and mb[64] >= 4 * mb[1] and ident
    return ok, (f"latency ms f=1 {lat[1]:.1f}, f=16 {lat[16]:.1f}, f=64 {lat[64]:.1f}; "
                f"max batch {mb[1]} / {mb[16]} / {mb[64]}; throughput*latency == batch {ident}")


def criterion_11(tmp):
    r = np.random.default_rng(11)
    z = r.normal(size=(4, 8, 8)).astype(np.float32)
    buf = encode_latent(z, 64)
    mvl_ok = decode_latent(buf)[0].tobytes() == z.tobytes() and encode_latent(decode_latent(buf)[0], 64) == buf
    data = generate_toy_dataset("blob2d", 8, 16, seed=0).images
    st = train_stage1(TrainConfig(steps=2, width=8, groups=4, embed_extent=16, batch_size=4), None, data)
    save_checkpoint(st, tmp / "m.mvc")
    blob = (tmp / "m.mvc").read_bytes()
    ckpt_ok = encode(*decode(blob)) == blob
    cli.main(["gen-data", "--n", "4", "--size", "16", "--seed", "5", "--out", str(tmp / "d")])
    img = tmp / "d" / "blob2d_00000.pgm"
    outs = []
    for i in range(2):
        cli.main(["encode", "--model", str(tmp / "m.mvc"), "--in", str(img), "--out", str(tmp / f"z{i}.mvl")])
        cli.main(["decode", "--model", str(tmp / "m.mvc"), "--in", str(tmp / f"z{i}.mvl"),
                  "--out", str(tmp / f"x{i}.npy")])
        cli.main(["eval-recon", "--data", str(tmp / "d" / "manifest.tsv"), "--method", "medvae",
                  "--model", str(tmp / "m.mvc"), "--out", str(tmp / f"r{i}.csv")])
        outs.append(tuple((tmp / n).read_bytes() for n in (f"z{i}.mvl", f"x{i}.npy", f"r{i}.csv")))
    model, head = cli._load_model_any(str(tmp / "m.mvc"))
    zr = cli._encode_array(model, head, load_any(img), raw=False).astype(np.float32)
    z_cli = decode_latent(outs[0][0])[0]
    cli_ok = (z_cli.tobytes() == zr.tobytes()
              and np.load(tmp / "x0.npy").tobytes() == cli.decode_latent_array(model, z_cli).tobytes())
    rerun_ok = outs[0] == outs[1]
    return mvl_ok and ckpt_ok and cli_ok and rerun_ok, (
        f"MVL {mvl_ok}, checkpoint {ckpt_ok}, CLI vs in-process {cli_ok}, reruns identical {rerun_ok}")


def criterion_12(tmp):
    data = generate_toy_dataset("blob2d", 16, 16, seed=0).images
    small = dict(width=8, groups=4, embed_extent=16, batch_size=4)
    s1 = train_stage1(TrainConfig(steps=5, lr=1e-3, **small), None, data)
    save_checkpoint(s1, tmp / "s1.mvc")
    s2 = train_stage2_2d(TrainConfig(stage="s2_2d", steps=5, lr=1e-2, **small), s1.model, None, data)
    save_checkpoint(s2, tmp / "s2.mvc")
    for kind in ("blob2d", "ring2d"):
        for split, seed in (("train", 0), ("test", 1)):
            cli.main(["gen-data", "--kind", kind, "--n", "16", "--size", "16", "--seed", str(seed),
                      "--split", split, "--out", str(tmp / kind / split)])
    args = ["--train", str(tmp / "blob2d" / "train" / "manifest.tsv"), str(tmp / "ring2d" / "train" / "manifest.tsv"),
            "--test", str(tmp / "blob2d" / "test" / "manifest.tsv"), str(tmp / "ring2d" / "test" / "manifest.tsv")]
    out = tmp / "ablate.csv"
    rc = cli.main(["ablate", *args, "--tasks", "blob", "ring", "--stage1", str(tmp / "s1.mvc"),
                   "--stage2", str(tmp / "s2.mvc"), "--epochs", "5", "--seeds", "0", "1", "2", "--out", str(out)])
    rows = list(csv.DictReader(out.open())) if rc == 0 else []
    header = list(rows[0]) if rows else []
    want = ["method", "f", "C", "blob_mean", "blob_std", "ring_mean", "ring_std", "avg", "seeds"]
    ok = rc == 0 and header == want and [r["method"] for r in rows] == ["stage1", "stage2"]
    ok &= all(r["seeds"] == "0 1 2" for r in rows)
    ok &= all(abs(float(r["avg"]) - (float(r["blob_mean"]) + float(r["ring_mean"])) / 2) <= 1e-12 for r in rows)
    return ok, f"exit {rc}, columns {header}"


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10, 11: criterion_11, 12: criterion_12}
NEEDS_TMP = {11, 12}


def run(number, tmp=None):
    fn = CRITERIA[number]
    try:
        ok, detail = fn(tmp) if number in NEEDS_TMP else fn()
    except Exception as exc:  # report, then fail
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return report(number, ok, detail)


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, tmp_path):
    assert run(number, tmp_path)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path
    results = []
    for k in sorted(CRITERIA):
        with tempfile.TemporaryDirectory() as d:
            results.append(run(k, Path(d)))
    sys.exit(0 if all(results) else 1)
