"""Noise schedule, denoising objective, and deterministic DDIM sampling
with classifier-free guidance."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import Rng, Tensor, mul, no_grad, square, tmean

DTYPE = np.float32


@dataclass
class DiffusionSchedule:
    timesteps: int
    betas: np.ndarray       # (T,) float64
    alphas: np.ndarray      # (T,)
    alpha_bar: np.ndarray   # (T,) strictly decreasing, in (0, 1)

    def __post_init__(self):
        ab = self.alpha_bar
        if not (np.all(ab > 0) and np.all(ab < 1) and np.all(np.diff(ab) < 0)):
            raise ConfigError("alpha_bar must be strictly decreasing within (0, 1)")
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ConfigError("betas must lie in (0, 1)")


def make_schedule(timesteps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> DiffusionSchedule:
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(timesteps=timesteps, betas=betas, alphas=alphas,
                             alpha_bar=np.cumprod(alphas))


@dataclass
class SamplerConfig:
    steps: int = 25
    cfg_scale: float = 7.5
    lam: float = 1.0
    eta: float = 0.0      # deterministic DDIM only
    clip_x0: bool = True

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")
        if self.eta != 0.0:
            raise ConfigError("only the deterministic eta=0 sampler is supported")
        if self.steps < 1:
            raise ConfigError("need at least one sampling step")


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Noised sample z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.timesteps):
        raise ConfigError(f"t out of range [0, {sched.timesteps})")
    ab = sched.alpha_bar[t].astype(z0.dtype)
    shape = (-1,) + (1,) * (z0.ndim - 1) if t.ndim else ()
    ab = ab.reshape(shape) if t.ndim else ab
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Guided noise estimate eps_u + s * (eps_c - eps_u).

    s=0 and s=1 return the respective operand unchanged so the collapse
    cases are exact rather than subject to float cancellation.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ConfigError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    if scale == 0.0:
        return eps_uncond.copy()
    if scale == 1.0:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(total: int, steps: int) -> np.ndarray:
    """`steps` evenly spaced sub-steps of [0, total), ascending, unique."""
    if steps > total:
        raise ConfigError(f"steps {steps} exceeds schedule length {total}")
    taus = np.unique(np.round(np.linspace(0, total - 1, steps)).astype(np.int64))
    return taus


@dataclass
class TrainBatch:
    images: np.ndarray        # (B, H, W, 3) float32 in [-1, 1]
    content: np.ndarray       # (B, C, d) content token embeddings
    polarity: np.ndarray | None  # (B, N) int8 of +1/-1, None for content-only models


def select_batch(aes_matrix: np.ndarray, polarity: np.ndarray) -> np.ndarray:
    """Batched pair selection: (2N, d) matrix + (B, N) polarity -> (B, N, d)."""
    n = aes_matrix.shape[0] // 2
    idx = 2 * np.arange(n)[None, :] + (polarity < 0)
    return aes_matrix[idx]


def training_loss(batch: TrainBatch, model, aesemb, rng: Rng, sched: DiffusionSchedule,
                  uncond_content: np.ndarray, p_drop: float = 0.1,
                  lam: float = 1.0) -> Tensor:
    """Mean squared error between true and predicted noise over the batch.

    With probability p_drop per sample the condition pair is replaced by the
    unconditional pair (empty-prompt content, zero aesthetic feature) so the
    sampler can apply classifier-free guidance later. Draw order from rng:
    timesteps, noise, dropout.
    """
    b = batch.images.shape[0]
    if b == 0:
        raise ConfigError("empty batch")
    t = rng.child("t").integers(0, sched.timesteps, b)
    eps = rng.child("noise").normal(batch.images.shape, dtype=DTYPE)
    keep = (rng.child("drop").uniform((b,)) >= p_drop).astype(DTYPE)
    z_t = q_sample(batch.images, t, eps, sched)

    f_c = np.where(keep[:, None, None] > 0, batch.content, uncond_content[None])
    f_a = None
    if model.proj is not None and batch.polarity is not None:
        f_t = select_batch(aesemb.matrix, batch.polarity).astype(DTYPE)
        f_a = model.project_assignment(Tensor(f_t))
        f_a = mul(f_a, Tensor(keep.reshape(b, 1, 1)))
    pred = model.forward(z_t, t, f_c, f_a, lam=lam)
    return tmean(square(pred - Tensor(eps)))


def ddim_sample(model, content: np.ndarray, f_t: np.ndarray | None,
                uncond_content: np.ndarray, cfg: SamplerConfig,
                sched: DiffusionSchedule, seed: int, baseline: bool = False,
                attn_probe=None) -> np.ndarray:
    """Deterministic 25-step (by default) DDIM chain with CFG.

    content: (B, C, d) per-sample content embeddings; f_t: (B, N, d) selected
    aesthetic rows or None. With baseline=True the aesthetic branch is
    skipped entirely (the content-only path). Returns (B, H, W, 3) in [-1, 1].
    Conditional and unconditional passes run as one merged forward so both
    models see identical GEMM shapes.
    """
    b = content.shape[0]
    size, chans = model.cfg.image_size, model.cfg.in_channels
    taus = ddim_timesteps(sched.timesteps, cfg.steps)[::-1]  # descending
    z = Rng(seed, "sample/init").normal((b, size, size, chans), dtype=DTYPE)

    use_aes = (model.proj is not None) and (f_t is not None) and not baseline
    with no_grad():
        f_a_cond = model.project_assignment(Tensor(f_t.astype(DTYPE))).data if use_aes else None
        for i, t_cur in enumerate(taus):
            ab_t = float(sched.alpha_bar[t_cur])
            ab_prev = float(sched.alpha_bar[taus[i + 1]]) if i + 1 < len(taus) else 1.0
            zz = np.concatenate([z, z], axis=0)
            tt = np.full(2 * b, t_cur, dtype=np.int64)
            ff_c = np.concatenate([content, np.broadcast_to(uncond_content, content.shape)], axis=0)
            ff_a = None
            if use_aes:
                ff_a = np.concatenate([f_a_cond, np.zeros_like(f_a_cond)], axis=0)
            out = model.forward(zz.astype(DTYPE), tt, ff_c.astype(DTYPE), ff_a,
                                lam=cfg.lam, attn_probe=attn_probe).data
            eps_hat = cfg_combine(out[b:], out[:b], cfg.cfg_scale)
            x0 = (z - np.sqrt(1.0 - ab_t, dtype=DTYPE) * eps_hat) / np.sqrt(ab_t, dtype=DTYPE)
            if cfg.clip_x0:
                x0 = np.clip(x0, -1.0, 1.0)
            z = np.sqrt(ab_prev, dtype=DTYPE) * x0 + np.sqrt(1.0 - ab_prev, dtype=DTYPE) * eps_hat
    return z.astype(DTYPE)
