"""Denoiser equivalences, parameter partition, and gradient routing."""

import numpy as np
import pytest

from conftest import randomize_params, tiny_unet
from vmixlab.errors import ConfigError
from vmixlab.numerics import Rng, Tensor, finite_diff_grad_check, square, tmean
from vmixlab.unet import UNet, UNetConfig, arch_fingerprint


def cond_inputs(model, batch=2, seed=3):
    cfg = model.cfg
    rng = Rng(seed, "unet-inputs")
    z = rng.child("z").normal((batch, cfg.image_size, cfg.image_size, cfg.in_channels))
    t = rng.child("t").integers(0, cfg.max_timestep, batch)
    f_c = rng.child("fc").normal((batch, cfg.context_len, cfg.context_dim))
    f_t = rng.child("ft").normal((batch, cfg.aes_pairs, cfg.context_dim))
    return z, t, f_c, f_t


class TestEquivalences:
    def test_init_transparency_any_aesthetic_input(self):
        """Fresh zero connector: output equals the no-branch model for any f_t."""
        vmix = tiny_unet(vmix=True, seed=5)
        base = tiny_unet(vmix=False, seed=5)
        randomize_params(vmix, seed=11, keep_transparent=True)
        randomize_params(base, seed=11)
        z, t, f_c, f_t = cond_inputs(vmix)
        for ft_seed in (1, 2):
            f_t = Rng(ft_seed, "ft").normal(f_t.shape)
            f_a = vmix.project_assignment(Tensor(f_t))
            assert np.all(f_a.data == 0.0)
            out_v = vmix.forward(z, t, f_c, f_a).data
            out_b = base.forward(z, t, f_c).data
            assert np.array_equal(out_v, out_b)

    def test_lambda_zero_equals_baseline_at_trained_weights(self):
        vmix = tiny_unet(vmix=True, seed=5)
        base = tiny_unet(vmix=False, seed=5)
        randomize_params(vmix, seed=13)   # connector nonzero: trained-like
        randomize_params(base, seed=13)
        z, t, f_c, f_t = cond_inputs(vmix)
        f_a = vmix.project_assignment(Tensor(f_t))
        assert np.any(f_a.data != 0.0)
        out_v = vmix.forward(z, t, f_c, f_a, lam=0.0).data
        out_b = base.forward(z, t, f_c).data
        assert np.array_equal(out_v, out_b)
        # and with the branch live the outputs must differ
        out_live = vmix.forward(z, t, f_c, f_a, lam=1.0).data
        assert not np.array_equal(out_live, out_b)

    def test_lambda_linearity_per_block(self):
        """Every attention site's output is affine in the mixing coefficient."""
        model = tiny_unet(vmix=True, seed=6)
        randomize_params(model, seed=19)
        sites = [model.mid_attn] + [s for _, s, _ in model.downs if s] \
            + [s for _, _, s in model.ups if s]
        assert len(sites) == 3
        rng = Rng(77, "site")
        for idx, site in enumerate(sites):
            dm = site.self_q.d_in
            x = rng.child(f"x{idx}").normal((2, 4, 4, dm))
            f_c = rng.child(f"fc{idx}").normal((2, model.cfg.context_len, model.cfg.context_dim))
            f_a = rng.child(f"fa{idx}").normal((2, model.cfg.context_len, model.cfg.context_dim))
            mixed = {}
            for lam in (0.0, 1.0, 2.0):
                probe = []
                site(Tensor(x), Tensor(f_c), Tensor(f_a), lam, attn_probe=probe)
                mixed[lam] = probe[0][3]
            lhs = mixed[2.0] - mixed[0.0]
            rhs = 2.0 * (mixed[1.0] - mixed[0.0])
            assert np.max(np.abs(lhs - rhs)) < 1e-5

    def test_shared_attention_map_every_block(self):
        model = tiny_unet(vmix=True, seed=7)
        randomize_params(model, seed=23)
        z, t, f_c, f_t = cond_inputs(model)
        f_a = model.project_assignment(Tensor(f_t))
        probe = []
        model.forward(z, t, f_c, f_a, lam=1.3, attn_probe=probe)
        assert len(probe) == 3  # sites at 8 (down+up) and 4 (middle)
        for name, attn_content, attn_aesthetic, _ in probe:
            assert np.array_equal(attn_content, attn_aesthetic), name

    def test_forward_deterministic(self):
        model = tiny_unet(vmix=True, seed=8)
        randomize_params(model, seed=29)
        z, t, f_c, f_t = cond_inputs(model)
        f_a = model.project_assignment(Tensor(f_t))
        a = model.forward(z, t, f_c, f_a).data
        b = model.forward(z, t, f_c, f_a).data
        assert np.array_equal(a, b)


class TestPartition:
    def test_base_only_model_has_empty_trainable_set(self):
        model = tiny_unet(vmix=False)
        frozen, trainable = model.parameter_partition()
        assert trainable == set()
        assert frozen == set(model.params)

    def test_vmix_without_lora_trains_projection_and_values_only(self):
        model = tiny_unet(vmix=True)
        frozen, trainable = model.parameter_partition()
        assert all(n.startswith("proj.") or ".cross_va." in n for n in trainable)
        assert any(n.startswith("proj.") for n in trainable)
        assert any(".cross_va." in n for n in trainable)

    def test_partition_is_exhaustive_and_disjoint(self):
        import vmixlab.lora as lora
        model = tiny_unet(vmix=True)
        lora.attach(model, rank=2, alpha=2.0)
        frozen, trainable = model.parameter_partition()
        assert frozen | trainable == set(model.params)
        assert not (frozen & trainable)
        n_frozen = sum(model.params[n].size for n in frozen)
        n_train = sum(model.params[n].size for n in trainable)
        assert n_frozen + n_train == sum(p.size for p in model.params.values())

    def test_frozen_parameters_unchanged_by_training_steps(self):
        from vmixlab.train import AdamW
        model = tiny_unet(vmix=True)
        randomize_params(model, seed=31, keep_transparent=True)
        model.set_finetune_mode(True)
        frozen, _ = model.parameter_partition()
        before = {n: model.params[n].data.tobytes() for n in frozen}
        opt = AdamW(model.params, lr=1e-2)
        z, t, f_c, f_t = cond_inputs(model)
        for _ in range(3):
            f_a = model.project_assignment(Tensor(f_t))
            loss = tmean(square(model.forward(z, t, f_c, f_a)))
            loss.backward()
            opt.step()
            opt.zero_grad()
        for n in frozen:
            assert model.params[n].data.tobytes() == before[n], n

    def test_frozen_gradients_exactly_zero_adapters_nonzero(self):
        model = tiny_unet(vmix=True)
        randomize_params(model, seed=37, keep_transparent=True)
        model.set_finetune_mode(True)
        z, t, f_c, f_t = cond_inputs(model)
        f_a = model.project_assignment(Tensor(f_t))
        loss = tmean(square(model.forward(z, t, f_c, f_a)))
        loss.backward()
        frozen, _ = model.parameter_partition()
        for n in frozen:
            assert model.params[n].grad is None, n
        assert np.any(model.params["proj.zero_w"].grad != 0.0)
        assert np.any(model.params["proj.zero_b"].grad != 0.0)


class TestGradientCheck:
    def test_loss_gradient_on_8x8_config(self):
        """Central differences on a 1-sample objective, float64, subset of params."""
        model = UNet(UNetConfig(image_size=8, base_channels=8, channel_mults=(1, 2),
                                attention_resolutions=(4, 2), heads=2, time_embed_dim=16,
                                context_len=8, context_dim=16, aes_pairs=4, groups=4,
                                vmix=True), seed=2, dtype=np.float64)
        randomize_params(model, seed=41)
        rng = Rng(4, "gc")
        z = rng.child("z").normal((1, 8, 8, 3), dtype=np.float64)
        t = np.array([500])
        f_c = rng.child("fc").normal((1, 8, 16), dtype=np.float64)
        f_t = rng.child("ft").normal((1, 4, 16), dtype=np.float64)
        eps = rng.child("eps").normal((1, 8, 8, 3), dtype=np.float64)
        probe_names = ["proj.zero_w", "proj.zero_b", "proj.up", "mid.attn.cross_va.w",
                       "mid.res1.conv1.w", "down0.res.temb.w", "out.gn.gamma",
                       "up1.attn.self_q.w", "stem.w"]
        params = [model.params[n] for n in probe_names]

        def f(_):
            f_a = model.project_assignment(Tensor(f_t, dtype=np.float64))
            pred = model.forward(z, t, f_c, f_a, lam=1.0)
            return tmean(square(pred - Tensor(eps, dtype=np.float64)))

        err = finite_diff_grad_check(f, params, h=1e-3, max_coords=6)
        assert err < 1e-4


class TestValidation:
    def test_time_range_error(self):
        model = tiny_unet()
        z, t, f_c, f_t = cond_inputs(model)
        with pytest.raises(ValueError):
            model.forward(z, np.array([0, 10 ** 6]), f_c, None)

    def test_shape_error(self):
        model = tiny_unet()
        _, t, f_c, _ = cond_inputs(model)
        with pytest.raises(Exception):
            model.forward(np.zeros((2, 7, 7, 3), dtype=np.float32), t, f_c, None)

    def test_attention_resolution_must_occur(self):
        with pytest.raises(ConfigError):
            tiny_unet(attention_resolutions=(8, 3))

    def test_fingerprint_ignores_vmix_flag(self):
        a = UNetConfig(vmix=True)
        b = UNetConfig(vmix=False)
        assert arch_fingerprint(a) == arch_fingerprint(b)

    def test_fingerprint_sensitive_to_structure(self):
        assert arch_fingerprint(UNetConfig()) != arch_fingerprint(UNetConfig(base_channels=48))

    def test_name_keyed_init_is_order_free(self):
        """Base weights identical whether or not the aesthetic branch exists."""
        a = tiny_unet(vmix=True, seed=9)
        b = tiny_unet(vmix=False, seed=9)
        for name, p in b.params.items():
            assert np.array_equal(p.data, a.params[name].data), name
