"""Aesthetic projection layer and value-mixed cross-attention.

The projection upscale-and-zero-connect stage maps the selected pair
features (N, d) to a content-shaped feature (C, d); its final linear is
zero-initialized so a fresh model is output-transparent. The attention
stage computes one probability map from (spatial queries, content keys)
and applies it to two value sets: the content values and, scaled by a
mixing coefficient, the aesthetic values.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    add,
    layer_norm_lastdim,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    transpose,
)


@dataclass
class ProjectionWeights:
    up: Tensor        # (N, C), mixes the N pair rows into C token slots
    ln_gamma: Tensor  # (d,)
    ln_beta: Tensor   # (d,)
    zero_w: Tensor    # (d, d), zeros at init
    zero_b: Tensor    # (d,), zeros at init

    def tensors(self):
        return {"up": self.up, "ln_gamma": self.ln_gamma, "ln_beta": self.ln_beta,
                "zero_w": self.zero_w, "zero_b": self.zero_b}


@dataclass
class VMixAttentionWeights:
    w_q: Tensor             # (d_model, d_model)
    w_kc: Tensor            # (d_text, d_model)
    w_vc: Tensor            # (d_text, d_model)
    w_va: Tensor | None     # (d_text, d_model); None on a content-only block
    heads: int


def project_aesthetic(f_t, w: ProjectionWeights) -> Tensor:
    """f_a = Z(LN(token-upscale(f_t))): (N, d) or (B, N, d) -> (C, d) / (B, C, d)."""
    if not isinstance(f_t, Tensor):
        f_t = Tensor(np.asarray(f_t, dtype=w.up.dtype))
    n, c = w.up.shape
    if f_t.shape[-2] != n:
        raise ShapeError(f"expected {n} pair rows, got {f_t.shape}")
    up_t = transpose(w.up, (1, 0))            # (C, N)
    mixed = matmul(up_t, f_t)                 # (..., C, d)
    normed = layer_norm_lastdim(mixed, w.ln_gamma, w.ln_beta)
    return add(matmul(normed, w.zero_w), w.zero_b)


def _heads_split(t: Tensor, heads: int) -> Tensor:
    b, l, dm = t.shape
    return transpose(reshape(t, (b, l, heads, dm // heads)), (0, 2, 1, 3))


def _heads_merge(t: Tensor) -> Tensor:
    b, h, l, dh = t.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (b, l, h * dh))


def _attention_probs(x: Tensor, f_c: Tensor, w: VMixAttentionWeights) -> Tensor:
    q = _heads_split(matmul(x, w.w_q), w.heads)
    k = _heads_split(matmul(f_c, w.w_kc), w.heads)
    dh = q.shape[-1]
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return softmax_lastdim(logits)  # (B, H, L, C)


def _ensure_batched(t, name):
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t))
    if t.ndim == 2:
        return reshape(t, (1,) + t.shape), True
    if t.ndim == 3:
        return t, False
    raise ShapeError(f"{name} must be rank 2 or 3, got rank {t.ndim}")


def content_attention(x, f_c, w: VMixAttentionWeights):
    """Single-map cross-attention: returns (out, attn).

    x (L, d_model) with f_c (C, d) gives out (L, d_model) and attn
    (H, L, C); batched rank-3 inputs give batched outputs. The map is
    returned so a second value set can reuse it.
    """
    xb, squeeze = _ensure_batched(x, "x")
    fb, _ = _ensure_batched(f_c, "f_c")
    attn = _attention_probs(xb, fb, w)
    vc = _heads_split(matmul(fb, w.w_vc), w.heads)
    out = _heads_merge(matmul(attn, vc))
    if squeeze:
        return reshape(out, out.shape[1:]), reshape(attn, attn.shape[1:])
    return out, attn


def value_mixed_attention(x, f_c, f_a, lam: float, w: VMixAttentionWeights,
                          return_attn: bool = False):
    """Dual-value attention: out = attn @ V_c + lam * (attn @ V_a).

    The probability map is computed once from (x, f_c) and reused for the
    aesthetic values. With return_attn=True the aesthetic-branch map is
    recomputed independently from the same queries/keys and returned
    alongside the content map so callers can assert they are identical.
    """
    if lam < 0:
        raise ValueError(f"mixing coefficient must be >= 0, got {lam}")
    xb, squeeze = _ensure_batched(x, "x")
    fb, _ = _ensure_batched(f_c, "f_c")
    ab, _ = _ensure_batched(f_a, "f_a")
    attn = _attention_probs(xb, fb, w)
    vc = _heads_split(matmul(fb, w.w_vc), w.heads)
    out = _heads_merge(matmul(attn, vc))
    va = _heads_split(matmul(ab, w.w_va), w.heads)
    mix = _heads_merge(matmul(attn, va))
    out = add(out, mul(mix, float(lam)))
    if squeeze:
        out = reshape(out, out.shape[1:])
    if not return_attn:
        return out
    attn_aes = _attention_probs(xb, fb, w)  # the aesthetic branch's own map
    if squeeze:
        return out, reshape(attn, attn.shape[1:]), reshape(attn_aes, attn_aes.shape[1:])
    return out, attn, attn_aes
