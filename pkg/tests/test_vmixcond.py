"""Projection-layer and value-mixed attention contracts."""

import math

import numpy as np
import pytest

from vmixlab.numerics import Rng, ShapeError, Tensor, tensor, tsum, square
from vmixlab.vmixcond import (
    ProjectionWeights,
    VMixAttentionWeights,
    content_attention,
    project_aesthetic,
    value_mixed_attention,
)

N, C, D, DM, H = 4, 8, 16, 32, 4


def fresh_projection(dtype=np.float32, trained=False):
    rng = Rng(100, "proj")
    up = tensor(rng.child("up").normal((N, C), std=0.2, dtype=np.float64), dtype=dtype, requires_grad=True)
    gamma = tensor(np.ones(D), dtype=dtype, requires_grad=True)
    beta = tensor(np.zeros(D), dtype=dtype, requires_grad=True)
    if trained:
        zw = tensor(rng.child("zw").normal((D, D), std=0.3, dtype=np.float64), dtype=dtype, requires_grad=True)
        zb = tensor(rng.child("zb").normal((D,), std=0.3, dtype=np.float64), dtype=dtype, requires_grad=True)
        beta = tensor(rng.child("beta").normal((D,), std=0.2, dtype=np.float64), dtype=dtype, requires_grad=True)
    else:
        zw = tensor(np.zeros((D, D)), dtype=dtype, requires_grad=True)
        zb = tensor(np.zeros(D), dtype=dtype, requires_grad=True)
    return ProjectionWeights(up=up, ln_gamma=gamma, ln_beta=beta, zero_w=zw, zero_b=zb)


def attn_weights(seed=5, with_va=True, dtype=np.float32):
    rng = Rng(seed, "attn")
    mk = lambda name, shape, std: tensor(
        rng.child(name).normal(shape, std=std, dtype=np.float64), dtype=dtype, requires_grad=True)
    return VMixAttentionWeights(
        w_q=mk("q", (DM, DM), DM ** -0.5),
        w_kc=mk("kc", (D, DM), D ** -0.5),
        w_vc=mk("vc", (D, DM), D ** -0.5),
        w_va=mk("va", (D, DM), D ** -0.5) if with_va else None,
        heads=H,
    )


def rand_inputs(seed=9, batch=None, dtype=np.float32):
    rng = Rng(seed, "inputs")
    shape_x = (6, DM) if batch is None else (batch, 6, DM)
    shape_f = (C, D) if batch is None else (batch, C, D)
    x = rng.child("x").normal(shape_x, dtype=dtype)
    f_c = rng.child("fc").normal(shape_f, dtype=dtype)
    f_a = rng.child("fa").normal(shape_f, dtype=dtype)
    return x, f_c, f_a


class TestProjection:
    def test_fresh_init_outputs_exact_zero(self):
        w = fresh_projection()
        f_t = Rng(1, "ft").normal((N, D))
        out = project_aesthetic(f_t, w)
        assert out.shape == (C, D)
        assert np.all(out.data == 0.0)

    def test_zero_input_matches_hand_composition(self):
        w = fresh_projection(dtype=np.float64, trained=True)
        out = project_aesthetic(np.zeros((N, D)), w).data
        # hand-evaluate the three stages in double precision
        mixed = w.up.data.T @ np.zeros((N, D))
        mu = mixed.mean(axis=-1, keepdims=True)
        var = ((mixed - mu) ** 2).mean(axis=-1, keepdims=True)
        ln = (mixed - mu) / np.sqrt(var + 1e-5) * w.ln_gamma.data + w.ln_beta.data
        ref = ln @ w.zero_w.data + w.zero_b.data
        assert np.max(np.abs(out - ref)) < 1e-12
        # LN of zeros collapses to beta, so the result is Z applied to beta
        assert np.allclose(ref, w.ln_beta.data @ w.zero_w.data + w.zero_b.data)

    def test_row_perturbation_mixes_tokens(self):
        w = fresh_projection(trained=True)
        f_t = Rng(2, "ft").normal((N, D))
        base = project_aesthetic(f_t, w).data
        bumped = f_t.copy()
        bumped[2] += 0.5
        assert not np.array_equal(project_aesthetic(bumped, w).data, base)

    def test_batched_matches_per_sample(self):
        w = fresh_projection(trained=True)
        f_t = Rng(3, "ftb").normal((5, N, D))
        batched = project_aesthetic(f_t, w).data
        for i in range(5):
            single = project_aesthetic(f_t[i], w).data
            assert np.allclose(batched[i], single, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            project_aesthetic(np.zeros((N + 1, D)), fresh_projection())


class TestContentAttention:
    def test_single_context_token_gives_unit_attention(self):
        w = attn_weights(with_va=False)
        x = Rng(4, "x1").normal((6, DM))
        f_c = Rng(4, "f1").normal((1, D))
        out, attn = content_attention(x, f_c, w)
        assert attn.shape == (H, 6, 1)
        assert np.all(attn.data == 1.0)

    def test_rows_sum_to_one(self):
        w = attn_weights(with_va=False)
        x, f_c, _ = rand_inputs()
        _, attn = content_attention(x, f_c, w)
        assert np.max(np.abs(attn.data.sum(axis=-1) - 1.0)) < 1e-6

    def test_matches_naive_per_head_loop(self):
        w = attn_weights(with_va=False, dtype=np.float64)
        x, f_c, _ = rand_inputs(dtype=np.float64)
        out, attn = content_attention(x, f_c, w)
        dh = DM // H
        q = x @ w.w_q.data
        k = f_c @ w.w_kc.data
        v = f_c @ w.w_vc.data
        ref = np.zeros((6, DM))
        for h in range(H):
            qh = q[:, h * dh:(h + 1) * dh]
            kh = k[:, h * dh:(h + 1) * dh]
            vh = v[:, h * dh:(h + 1) * dh]
            logits = qh @ kh.T / math.sqrt(dh)
            e = np.exp(logits - logits.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
            assert np.max(np.abs(a - attn.data[h])) < 1e-12
            ref[:, h * dh:(h + 1) * dh] = a @ vh
        assert np.max(np.abs(out.data - ref)) < 1e-5


class TestValueMixedAttention:
    def test_lambda_zero_equals_content_branch(self):
        w = attn_weights()
        x, f_c, f_a = rand_inputs()
        mixed = value_mixed_attention(x, f_c, f_a, 0.0, w)
        base, _ = content_attention(x, f_c, w)
        assert np.array_equal(mixed.data, base.data)

    def test_zero_f_a_is_transparent_at_lambda_one(self):
        w = attn_weights()
        x, f_c, _ = rand_inputs()
        mixed = value_mixed_attention(x, f_c, np.zeros((C, D), dtype=np.float32), 1.0, w)
        base, _ = content_attention(x, f_c, w)
        assert np.array_equal(mixed.data, base.data)

    def test_lambda_linearity(self):
        w = attn_weights()
        x, f_c, f_a = rand_inputs()
        outs = {lam: value_mixed_attention(x, f_c, f_a, lam, w).data for lam in (0.0, 1.0, 2.0)}
        lhs = outs[2.0] - outs[0.0]
        rhs = 2.0 * (outs[1.0] - outs[0.0])
        assert np.max(np.abs(lhs - rhs)) < 1e-5

    def test_shared_map_equality(self):
        w = attn_weights()
        x, f_c, f_a = rand_inputs()
        _, attn_c, attn_a = value_mixed_attention(x, f_c, f_a, 1.3, w, return_attn=True)
        assert np.array_equal(attn_c.data, attn_a.data)

    def test_negative_lambda_rejected(self):
        w = attn_weights()
        x, f_c, f_a = rand_inputs()
        with pytest.raises(ValueError):
            value_mixed_attention(x, f_c, f_a, -0.5, w)

    def test_batched_matches_unbatched(self):
        w = attn_weights()
        x, f_c, f_a = rand_inputs(batch=3)
        batched = value_mixed_attention(x, f_c, f_a, 1.0, w).data
        for i in range(3):
            single = value_mixed_attention(x[i], f_c[i], f_a[i], 1.0, w).data
            assert np.allclose(batched[i], single, atol=1e-6)


class TestGradientRouting:
    def test_zero_connector_receives_nonzero_grad_frozen_receive_none(self):
        """With w_va nonzero at init, loss gradient reaches the zero layer."""
        proj = fresh_projection()
        w = attn_weights()
        for t in (w.w_q, w.w_kc, w.w_vc):
            t.requires_grad = False  # frozen base weights
        x, f_c, _ = rand_inputs()
        f_t = tensor(Rng(8, "ft").normal((N, D)))
        f_a = project_aesthetic(f_t, proj)
        out = value_mixed_attention(x, f_c, f_a, 1.0, w)
        tsum(square(out)).backward()
        assert proj.zero_w.grad is not None and np.any(proj.zero_w.grad != 0.0)
        assert proj.zero_b.grad is not None and np.any(proj.zero_b.grad != 0.0)
        assert w.w_va.grad is None or np.all(w.w_va.grad == 0.0)  # f_a == 0 at init
        assert w.w_q.grad is None and w.w_kc.grad is None and w.w_vc.grad is None

    def test_after_one_step_w_va_starts_learning(self):
        """Once the zero layer moves off zero, the aesthetic value trains too."""
        proj = fresh_projection()
        w = attn_weights()
        x, f_c, _ = rand_inputs()
        f_t = tensor(Rng(8, "ft").normal((N, D)))
        out = value_mixed_attention(x, f_c, project_aesthetic(f_t, proj), 1.0, w)
        tsum(square(out)).backward()
        # naive SGD step on the connector only
        proj.zero_w.data = proj.zero_w.data - 0.1 * proj.zero_w.grad
        proj.zero_b.data = proj.zero_b.data - 0.1 * proj.zero_b.grad
        w.w_va.zero_grad()
        out2 = value_mixed_attention(x, f_c, project_aesthetic(f_t, proj), 1.0, w)
        tsum(square(out2)).backward()
        assert w.w_va.grad is not None and np.any(w.w_va.grad != 0.0)
