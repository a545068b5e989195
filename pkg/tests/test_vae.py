import numpy as np
import pytest

from medvae import ndtensor as nt
from medvae.checkpoint import CheckpointError
from medvae.ndtensor import ShapeError, Tensor
from medvae.vae import (LatentDist, ProjectionHead, VAEConfig, VAEModel, apply_lora, inflate_2d_to_3d,
                        inflate_head, inflate_kernel, latent_shape, load_model, lora_parameter_count,
                        merge_lora, project_latent, reparameterize, save_model)

SIX_CONFIGS = [(2, 16, 1), (2, 16, 3), (2, 64, 1), (2, 64, 4), (3, 64, 1), (3, 512, 1)]


def small(ndim=2, f=16, c=1, **kw):
    return VAEConfig(ndim=ndim, f=f, latent_channels=c, width=8, groups=4, **kw)


class TestConfig:
    @pytest.mark.parametrize("ndim,f,per_axis", [(2, 16, 4), (2, 64, 8), (3, 64, 4), (3, 512, 8), (2, 1, 1)])
    def test_per_axis_and_stages(self, ndim, f, per_axis):
        cfg = VAEConfig(ndim=ndim, f=f)
        assert cfg.per_axis == per_axis
        assert cfg.stages == int(np.log2(per_axis))

    @pytest.mark.parametrize("ndim,f", [(2, 8), (2, 36), (3, 16), (3, 27), (4, 16)])
    def test_rejects_bad_factor(self, ndim, f):
        with pytest.raises(ValueError):
            VAEConfig(ndim=ndim, f=f)


class TestLatentShape:
    def test_paper_examples(self):
        assert latent_shape(VAEConfig(f=16, latent_channels=3), (1024, 1024)) == (256, 256, 3)
        assert latent_shape(VAEConfig(ndim=3, f=512), (256, 256, 256)) == (32, 32, 32, 1)

    def test_identity_factor(self):
        assert latent_shape(VAEConfig(f=1, latent_channels=2), (12, 20)) == (12, 20, 2)

    @pytest.mark.parametrize("ndim,f,c", SIX_CONFIGS)
    def test_element_count(self, ndim, f, c):
        dims = (64,) * ndim
        shape = latent_shape(VAEConfig(ndim=ndim, f=f, latent_channels=c), dims)
        assert np.prod(shape[:-1]) * c == np.prod(dims) // f * c
        k = round(f ** (1 / ndim))
        assert shape == tuple(d // k for d in dims) + (c,)

    def test_non_divisible(self):
        with pytest.raises(ShapeError, match="axis 1"):
            latent_shape(VAEConfig(f=16), (32, 30))


class TestModel:
    @pytest.mark.parametrize("ndim,f,c", SIX_CONFIGS)
    def test_round_trip_shape(self, ndim, f, c, rng):
        model = VAEModel(small(ndim, f, c))
        dims = (16,) * ndim
        x = Tensor(rng.random((2, 1) + dims))
        with nt.no_grad():
            dist = model.encode(x)
            assert dist.mean.shape == (2, c) + latent_shape(model.config, dims)[:-1]
            assert dist.logvar.shape == dist.mean.shape
            out = model.decode(reparameterize(dist, 0))
        assert out.shape == x.shape

    def test_encoder_emits_two_c_channels(self):
        model = VAEModel(small(c=3))
        assert model["enc.conv_out.weight"].shape[0] == 6
        assert model["dec.conv_in.weight"].shape[1] == 3

    def test_zero_init_encoder_output(self, rng):
        model = VAEModel(small(), zero_init_out=True)
        dist = model.encode(Tensor(rng.random((1, 1, 16, 16))))
        assert not dist.mean.data.any() and not dist.logvar.data.any()

    def test_zero_decoder_is_constant(self, rng):
        model = VAEModel(small())
        for name, p in model.named_parameters("dec."):
            if not name.endswith("norm1.weight") and not name.endswith("norm2.weight") \
                    and "norm_out.weight" not in name:
                p.data[:] = 0.0
        out = model.decode(Tensor(rng.normal(size=(2, 1, 4, 4)))).data
        np.testing.assert_array_equal(out, out.flat[0])

    def test_logvar_clamped(self, rng):
        model = VAEModel(small())
        model["enc.conv_out.bias"].data[1] = 1e4
        model["enc.conv_out.bias"].data[0] = 0.0
        lv = model.encode(Tensor(rng.random((1, 1, 16, 16)))).logvar.data
        assert lv.max() <= 20.0 and lv.min() >= -30.0

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            VAEModel(small()).encode(Tensor(np.zeros((1, 1, 16, 18))))

    def test_deterministic(self, rng):
        x = Tensor(rng.random((1, 1, 16, 16)))
        a = VAEModel(small(), seed=4).forward(x, deterministic=True)[0].data
        b = VAEModel(small(), seed=4).forward(x, deterministic=True)[0].data
        assert a.tobytes() == b.tobytes()

    def test_transpose_upsampling_variant(self, rng):
        model = VAEModel(small(upsample="transpose"))
        out = model.decode(Tensor(rng.normal(size=(1, 1, 4, 4))))
        assert out.shape == (1, 1, 16, 16)


class TestReparameterize:
    def test_deterministic_returns_mean(self, rng):
        d = LatentDist(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))))
        assert reparameterize(d, deterministic=True).data is d.mean.data

    def test_clamp_floor_gives_mean(self, rng):
        mu = rng.normal(size=(10,))
        z = reparameterize(LatentDist(Tensor(mu), Tensor(np.full(10, -30.0))), 0)
        np.testing.assert_allclose(z.data, mu, atol=1e-5)

    def test_monte_carlo_moments(self):
        n = 100_000
        mu, lv = 0.7, np.log(0.3**2)
        z = reparameterize(LatentDist(Tensor(np.full(n, mu)), Tensor(np.full(n, lv))), 11).data
        assert abs(z.mean() - mu) <= 0.01 * mu
        assert abs(z.std() - 0.3) <= 0.01 * 0.3

    def test_seeded(self):
        d = LatentDist(Tensor(np.zeros(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(reparameterize(d, 3).data, reparameterize(d, 3).data)


class TestProjectionHead:
    @pytest.mark.parametrize("c", [1, 4])
    def test_identity_at_init(self, c, rng):
        z = rng.normal(size=(2, c, 8, 8))
        out = project_latent(ProjectionHead(c), Tensor(z))
        assert out.shape == z.shape
        np.testing.assert_array_equal(out.data, z)

    def test_gradient_reaches_head_only(self, rng):
        model = VAEModel(small())
        model.set_requires_grad(False)
        head = ProjectionHead(1)
        z = model.encode(Tensor(rng.random((2, 1, 16, 16)))).mean
        (head(z) ** 2).sum().backward()
        assert all(p.grad is not None for p in head.parameters())
        assert all(p.grad is None for p in model.parameters())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ProjectionHead(2)(Tensor(np.zeros((1, 3, 4, 4))))

    def test_inflated_head(self, rng):
        head = ProjectionHead(1, hidden=4, seed=2)
        head["head.conv2.weight"].data[:] = rng.normal(size=head["head.conv2.weight"].shape)
        z2 = rng.normal(size=(1, 1, 6, 6))
        h3 = inflate_head(head)
        out3 = h3(Tensor(np.repeat(z2[..., None], 5, axis=-1))).data
        np.testing.assert_allclose(out3[..., 2], head(Tensor(z2)).data, atol=1e-12)


class TestLora:
    def test_zero_init_is_noop(self, rng):
        base = VAEModel(small())
        lora = apply_lora(base, 4)
        x = Tensor(rng.random((2, 1, 16, 16)))
        a = base.forward(x, deterministic=True)[0].data
        b = lora.forward(x, deterministic=True)[0].data
        np.testing.assert_array_equal(a, b)

    def test_merge_equivalence(self, rng):
        lora = apply_lora(VAEModel(small()), 4, seed=1)
        for name, p in lora.named_parameters():
            if name.endswith("lora_B"):
                p.data[:] = rng.normal(0, 0.05, p.shape)
        merged = merge_lora(lora)
        x = Tensor(rng.random((2, 1, 16, 16)))
        a = lora.forward(x, deterministic=True)[0].data
        b = merged.forward(x, deterministic=True)[0].data
        assert np.max(np.abs(a - b)) <= 1e-10
        assert not any(".lora_" in n for n in merged.params)

    def test_only_adapters_trainable(self):
        lora = apply_lora(VAEModel(small()), 2)
        names = [n for n, p in lora.named_parameters() if p.requires_grad]
        assert names and all(".lora_" in n for n in names)

    @pytest.mark.parametrize("rank", [1, 2, 4])
    def test_parameter_count_formula(self, rank):
        base = VAEModel(small())
        lora = apply_lora(base, rank)
        expected = 0
        for name in base.conv_names:
            w = base[f"{name}.weight"].data
            fan_in, fan_out = int(np.prod(w.shape[1:])), w.shape[0]
            if rank <= min(fan_in, fan_out):
                expected += rank * (fan_in + fan_out)
        assert lora_parameter_count(lora) == expected
        assert lora.num_parameters(trainable_only=True) == expected

    def test_narrow_layers_skipped(self):
        lora = apply_lora(VAEModel(small()), 4)
        assert lora.lora_skipped == ["enc.conv_out", "dec.conv_out"]

    def test_rank_exceeding_fans(self):
        with pytest.raises(ValueError, match="rank"):
            apply_lora(VAEModel(small()), 4, layers=["dec.conv_out"])
        with pytest.raises(ValueError):
            apply_lora(VAEModel(small()), 0)


def conv2d_oracle(x, w, b):
    return nt.conv(Tensor(x), Tensor(w), Tensor(b), padding=1).data


class TestInflation:
    def test_all_ones_kernel(self):
        k3 = inflate_kernel(np.ones((1, 1, 3, 3)))
        assert k3.shape == (1, 1, 3, 3, 3)
        np.testing.assert_array_equal(k3[..., 1], 1.0)
        np.testing.assert_array_equal(k3[..., 0], 0.0)
        np.testing.assert_array_equal(k3[..., 2], 0.0)

    def test_even_kernel(self):
        with pytest.raises(ValueError):
            inflate_kernel(np.ones((1, 1, 2, 2)))

    def test_depth_replication(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        vol = np.repeat(x[..., None], 5, axis=-1)
        out3 = nt.conv(Tensor(vol), Tensor(inflate_kernel(w)), Tensor(b), padding=1).data
        ref = conv2d_oracle(x, w, b)
        for s in range(5):
            assert np.max(np.abs(out3[..., s] - ref)) <= 1e-10

    def test_model_inflation(self, rng):
        m2 = VAEModel(small(), seed=3)
        m3 = inflate_2d_to_3d(m2)
        assert m3.config.ndim == 3 and m3.config.f == 64 and m3.config.per_axis == 4
        for name, p in m2.params.items():
            q = m3.params[name].data
            if p.ndim == 4:
                np.testing.assert_array_equal(q[..., 1], p.data)
                assert not q[..., 0].any() and not q[..., 2].any()
                assert q.size == p.size * 3
            else:
                np.testing.assert_array_equal(q, p.data)

    def test_inflated_model_on_replicated_volume(self, rng):
        m2 = VAEModel(small(), seed=3)
        m3 = inflate_2d_to_3d(m2)
        x = rng.random((1, 1, 16, 16))
        vol = np.repeat(x[..., None], 16, axis=-1)
        with nt.no_grad():
            mu2 = m2.encode(Tensor(x)).mean.data
            mu3 = m3.encode(Tensor(vol)).mean.data
            rec2 = m2.decode(Tensor(mu2)).data
            rec3 = m3.decode(Tensor(mu3)).data
        # group norm statistics span depth, so the match holds when every slice is identical
        for s in range(mu3.shape[-1]):
            np.testing.assert_allclose(mu3[..., s], mu2, atol=1e-10)
        for s in range(rec3.shape[-1]):
            np.testing.assert_allclose(rec3[..., s], rec2, atol=1e-10)

    def test_inflation_needs_2d(self):
        with pytest.raises(ValueError):
            inflate_2d_to_3d(VAEModel(small(3, 64)))


class TestModelCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = apply_lora(VAEModel(small(c=3)), 2)
        head = ProjectionHead(3, hidden=4)
        save_model(tmp_path / "m.mvc", model, head)
        m2, h2 = load_model(tmp_path / "m.mvc")
        assert m2.config == model.config
        for k, v in model.state_dict().items():
            assert m2.state_dict()[k].tobytes() == v.tobytes()
        assert h2 is not None and h2.digest() == head.digest()
        save_model(tmp_path / "m2.mvc", m2, h2)
        assert (tmp_path / "m.mvc").read_bytes() == (tmp_path / "m2.mvc").read_bytes()

    def test_mismatch(self):
        with pytest.raises(CheckpointError):
            VAEModel(small()).load_state_dict(VAEModel(small(f=64)).state_dict())
