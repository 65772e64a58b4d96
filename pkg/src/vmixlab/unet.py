"""Pixel-space conditional denoiser.

A small residual U-Net with transformer sites (self-attention followed by
value-mixed cross-attention and a feed-forward) at the configured
resolutions. Every parameter is initialized from a stream keyed by its
name, so a base network keeps identical weights whether or not adapter
branches are attached. Images are channels-last (B, H, W, C).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .numerics import (
    Rng,
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    fnv1a64,
    group_norm,
    layer_norm_lastdim,
    linear,
    matmul,
    mul,
    reshape,
    silu,
    sinusoidal_embedding,
    transpose,
    upsample_nearest2x,
)
from .vmixcond import (
    ProjectionWeights,
    VMixAttentionWeights,
    content_attention,
    project_aesthetic,
    value_mixed_attention,
)


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 64
    channel_mults: tuple = (1, 2)
    attention_resolutions: tuple = (16, 8)
    heads: int = 4
    time_embed_dim: int = 256
    context_len: int = 16   # C: tokens in the content embedding
    context_dim: int = 64   # d: feature dim of the text encoder
    aes_pairs: int = 4      # N: opposing label pairs
    vmix: bool = True
    groups: int = 8
    max_timestep: int = 1000


def arch_fingerprint(cfg: UNetConfig) -> int:
    """Structural hash shared by a base model and any plugin built on it."""
    parts = (cfg.image_size, cfg.in_channels, cfg.base_channels,
             tuple(cfg.channel_mults), tuple(cfg.attention_resolutions),
             cfg.heads, cfg.time_embed_dim, cfg.context_len, cfg.context_dim,
             cfg.aes_pairs, cfg.groups, cfg.max_timestep)
    return fnv1a64(repr(parts))


class ParamStore:
    """Registry of named parameters with name-keyed deterministic init."""

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.layers: dict[str, object] = {}

    def _register(self, name, arr, trainable=True):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        t = Tensor(arr.astype(self.dtype), requires_grad=trainable)
        self.params[name] = t
        return t

    def normal(self, name, shape, std=1.0):
        draw = Rng(self.seed, "param/" + name).normal(shape, dtype=np.float64) * std
        return self._register(name, draw)

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._register(name, np.ones(shape))


class Linear:
    def __init__(self, store, name, d_in, d_out, bias=True, zero=False, std=None):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        if zero:
            self.w = store.zeros(name + ".w", (d_in, d_out))
        else:
            self.w = store.normal(name + ".w", (d_in, d_out), std=std or d_in ** -0.5)
        self.b = store.zeros(name + ".b", (d_out,)) if bias else None
        self.lora = None  # (A, B, scale) set by the adapter module
        store.layers[name] = self

    def weight(self) -> Tensor:
        if self.lora is None:
            return self.w
        a, bb, scale = self.lora
        return add(self.w, mul(transpose(matmul(bb, a), (1, 0)), scale))

    def __call__(self, x):
        return linear(x, self.weight(), self.b)


class Conv:
    def __init__(self, store, name, c_in, c_out, kernel=3, bias=True, zero=False, std=None):
        self.name = name
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        fan_in = c_in * kernel * kernel
        if zero:
            self.w = store.zeros(name + ".w", (c_out, c_in, kernel, kernel))
        else:
            self.w = store.normal(name + ".w", (c_out, c_in, kernel, kernel),
                                  std=std or fan_in ** -0.5)
        self.b = store.zeros(name + ".b", (c_out,)) if bias else None
        self.lora = None
        store.layers[name] = self

    def weight(self) -> Tensor:
        if self.lora is None:
            return self.w
        a, bb, scale = self.lora  # A (r, Cin*k*k), B (Cout, r)
        delta = reshape(matmul(bb, a), self.w.shape)
        return add(self.w, mul(delta, scale))

    def __call__(self, x, stride=1):
        return conv2d(x, self.weight(), self.b, stride=stride, padding=self.kernel // 2)


class GroupNormLayer:
    def __init__(self, store, name, channels, groups):
        self.groups = groups
        self.gamma = store.ones(name + ".gamma", (channels,))
        self.beta = store.zeros(name + ".beta", (channels,))

    def __call__(self, x):
        return group_norm(x, self.groups, self.gamma, self.beta)


class LayerNormLayer:
    def __init__(self, store, name, dim):
        self.gamma = store.ones(name + ".gamma", (dim,))
        self.beta = store.zeros(name + ".beta", (dim,))

    def __call__(self, x):
        return layer_norm_lastdim(x, self.gamma, self.beta)


class ResBlock:
    def __init__(self, store, name, c_in, c_out, time_dim, groups):
        self.gn1 = GroupNormLayer(store, name + ".gn1", c_in, min(groups, c_in))
        self.conv1 = Conv(store, name + ".conv1", c_in, c_out)
        self.temb = Linear(store, name + ".temb", time_dim, c_out)
        self.gn2 = GroupNormLayer(store, name + ".gn2", c_out, min(groups, c_out))
        self.conv2 = Conv(store, name + ".conv2", c_out, c_out)
        self.skip = Conv(store, name + ".skip", c_in, c_out, kernel=1) if c_in != c_out else None

    def __call__(self, x, temb):
        h = self.conv1(silu(self.gn1(x)))
        tvec = self.temb(silu(temb))
        h = add(h, reshape(tvec, (tvec.shape[0], 1, 1, tvec.shape[1])))
        h = self.conv2(silu(self.gn2(h)))
        return add(self.skip(x) if self.skip else x, h)


class AttentionSite:
    """Self-attention, value-mixed cross-attention, feed-forward (pre-LN)."""

    def __init__(self, store, name, dm, ctx_dim, heads, vmix):
        self.name = name
        self.heads = heads
        self.ln1 = LayerNormLayer(store, name + ".ln1", dm)
        self.self_q = Linear(store, name + ".self_q", dm, dm, bias=False)
        self.self_k = Linear(store, name + ".self_k", dm, dm, bias=False)
        self.self_v = Linear(store, name + ".self_v", dm, dm, bias=False)
        self.ln2 = LayerNormLayer(store, name + ".ln2", dm)
        self.cross_q = Linear(store, name + ".cross_q", dm, dm, bias=False)
        self.cross_kc = Linear(store, name + ".cross_kc", ctx_dim, dm, bias=False)
        self.cross_vc = Linear(store, name + ".cross_vc", ctx_dim, dm, bias=False)
        self.cross_va = Linear(store, name + ".cross_va", ctx_dim, dm, bias=False) if vmix else None
        self.ln3 = LayerNormLayer(store, name + ".ln3", dm)
        self.ff1 = Linear(store, name + ".ff1", dm, 2 * dm)
        self.ff2 = Linear(store, name + ".ff2", 2 * dm, dm)

    def _self_weights(self):
        return VMixAttentionWeights(w_q=self.self_q.weight(), w_kc=self.self_k.weight(),
                                    w_vc=self.self_v.weight(), w_va=None, heads=self.heads)

    def _cross_weights(self):
        va = self.cross_va.weight() if self.cross_va is not None else None
        return VMixAttentionWeights(w_q=self.cross_q.weight(), w_kc=self.cross_kc.weight(),
                                    w_vc=self.cross_vc.weight(), w_va=va, heads=self.heads)

    def __call__(self, x, f_c, f_a, lam, attn_probe=None):
        b, h, w, c = x.shape
        seq = reshape(x, (b, h * w, c))
        normed = self.ln1(seq)
        sa, _ = content_attention(normed, normed, self._self_weights())
        seq = add(seq, sa)
        ctx = self.ln2(seq)
        if self.cross_va is not None and f_a is not None:
            if attn_probe is not None:
                ca, attn_c, attn_a = value_mixed_attention(
                    ctx, f_c, f_a, lam, self._cross_weights(), return_attn=True)
                attn_probe.append((self.name, attn_c.data, attn_a.data, ca.data))
            else:
                ca = value_mixed_attention(ctx, f_c, f_a, lam, self._cross_weights())
        else:
            ca, _ = content_attention(ctx, f_c, self._cross_weights())
        seq = add(seq, ca)
        seq = add(seq, self.ff2(silu(self.ff1(self.ln3(seq)))))
        return reshape(seq, (b, h, w, c))


class UNet:
    """Noise predictor conditioned on content tokens and aesthetic features."""

    def __init__(self, cfg: UNetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        self.fingerprint = arch_fingerprint(cfg)
        store = ParamStore(seed, dtype)
        self.store = store
        tdim = cfg.time_embed_dim
        self.time1 = Linear(store, "time1", tdim, tdim)
        self.time2 = Linear(store, "time2", tdim, tdim)
        self.stem = Conv(store, "stem", cfg.in_channels, cfg.base_channels)

        res = cfg.image_size
        attn_res = set(cfg.attention_resolutions)
        seen_res = set()
        ch = cfg.base_channels
        self.downs = []          # (res_block, attn_site|None, down_conv)
        self.skip_channels = []
        for i, mult in enumerate(cfg.channel_mults):
            c_out = cfg.base_channels * mult
            block = ResBlock(store, f"down{i}.res", ch, c_out, tdim, cfg.groups)
            site = None
            if res in attn_res:
                site = AttentionSite(store, f"down{i}.attn", c_out, cfg.context_dim,
                                     cfg.heads, cfg.vmix)
            seen_res.add(res)
            pool = Conv(store, f"down{i}.pool", c_out, c_out)
            self.downs.append((block, site, pool))
            self.skip_channels.append(c_out)
            ch = c_out
            res //= 2

        self.mid1 = ResBlock(store, "mid.res1", ch, ch, tdim, cfg.groups)
        self.mid_attn = AttentionSite(store, "mid.attn", ch, cfg.context_dim,
                                      cfg.heads, cfg.vmix)
        self.mid2 = ResBlock(store, "mid.res2", ch, ch, tdim, cfg.groups)
        seen_res.add(res)

        missing = attn_res - seen_res
        if missing:
            raise ConfigError(f"attention resolutions {sorted(missing)} never occur "
                              f"(visited {sorted(seen_res)})")

        self.ups = []            # (up_conv, res_block, attn_site|None)
        for i in reversed(range(len(cfg.channel_mults))):
            res *= 2
            c_out = cfg.base_channels * cfg.channel_mults[i]
            upconv = Conv(store, f"up{i}.upconv", ch, ch)
            block = ResBlock(store, f"up{i}.res", ch + self.skip_channels[i], c_out,
                             tdim, cfg.groups)
            site = None
            if res in attn_res:
                site = AttentionSite(store, f"up{i}.attn", c_out, cfg.context_dim,
                                     cfg.heads, cfg.vmix)
            self.ups.append((upconv, block, site))
            ch = c_out

        self.out_gn = GroupNormLayer(store, "out.gn", ch, min(cfg.groups, ch))
        self.out_conv = Conv(store, "out.conv", ch, cfg.in_channels, zero=True)

        if cfg.vmix:
            d = cfg.context_dim
            self.proj = ProjectionWeights(
                up=store.normal("proj.up", (cfg.aes_pairs, cfg.context_len), std=0.2),
                ln_gamma=store.ones("proj.ln_gamma", (d,)),
                ln_beta=store.zeros("proj.ln_beta", (d,)),
                zero_w=store.zeros("proj.zero_w", (d, d)),
                zero_b=store.zeros("proj.zero_b", (d,)),
            )
        else:
            self.proj = None

    # -- parameters ------------------------------------------------------

    @property
    def params(self):
        return self.store.params

    @staticmethod
    def is_adapter_param(name: str) -> bool:
        return name.startswith("proj.") or ".cross_va." in name or name.startswith("lora.")

    def parameter_partition(self):
        """(frozen, trainable) name sets under the frozen-base finetune regime."""
        trainable = {n for n in self.params if self.is_adapter_param(n)}
        frozen = set(self.params) - trainable
        return frozen, trainable

    def set_finetune_mode(self, on: bool = True):
        """Freeze base weights; adapters (projection, w_va, adapter factors) stay live."""
        frozen, trainable = self.parameter_partition()
        for n in frozen:
            self.params[n].requires_grad = not on
        for n in trainable:
            self.params[n].requires_grad = True

    def export_state(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}")
        for n, arr in state.items():
            p = self.params[n]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ShapeError(f"{n}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(self.dtype)

    # -- conditioning ------------------------------------------------------

    def project_assignment(self, f_t) -> Tensor:
        """Aesthetic feature f_a from selected pair rows f_t: (B, N, d) -> (B, C, d)."""
        if self.proj is None:
            raise ConfigError("model was built without the aesthetic branch")
        return project_aesthetic(f_t, self.proj)

    # -- forward -----------------------------------------------------------

    def forward(self, z_t, t, f_c, f_a=None, lam: float = 1.0, attn_probe=None) -> Tensor:
        cfg = self.cfg
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=self.dtype))
        if z.ndim != 4 or z.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
            raise ShapeError(f"z_t shape {z.shape} does not match config")
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= cfg.max_timestep):
            raise ValueError(f"timestep out of range [0, {cfg.max_timestep})")
        if not isinstance(f_c, Tensor):
            f_c = Tensor(np.asarray(f_c, dtype=self.dtype))
        if f_a is not None and not isinstance(f_a, Tensor):
            f_a = Tensor(np.asarray(f_a, dtype=self.dtype))

        temb = Tensor(sinusoidal_embedding(t, cfg.time_embed_dim, dtype=self.dtype))
        temb = self.time2(silu(self.time1(temb)))

        h = self.stem(z)
        skips = []
        for block, site, pool in self.downs:
            h = block(h, temb)
            if site is not None:
                h = site(h, f_c, f_a, lam, attn_probe)
            skips.append(h)
            h = pool(h, stride=2)

        h = self.mid1(h, temb)
        h = self.mid_attn(h, f_c, f_a, lam, attn_probe)
        h = self.mid2(h, temb)

        for (upconv, block, site), skip in zip(self.ups, reversed(skips)):
            h = upconv(upsample_nearest2x(h))
            h = block(concat([h, skip], axis=-1), temb)
            if site is not None:
                h = site(h, f_c, f_a, lam, attn_probe)

        return self.out_conv(silu(self.out_gn(h)))

    __call__ = forward
