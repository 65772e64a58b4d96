"""Shared fixtures: tiny model configurations that keep unit tests fast."""

import numpy as np
import pytest

from vmixlab.config import RunConfig
from vmixlab.numerics import Rng
from vmixlab.unet import UNet, UNetConfig

TINY = dict(image_size=16, base_channels=8, channel_mults=(1, 2),
            attention_resolutions=(8, 4), heads=2, time_embed_dim=32,
            context_len=8, context_dim=16, aes_pairs=4, groups=4)


def tiny_unet(vmix=True, seed=0, dtype=np.float32, **overrides):
    cfg = dict(TINY)
    cfg.update(overrides)
    return UNet(UNetConfig(vmix=vmix, **cfg), seed=seed, dtype=dtype)


def randomize_params(model, seed=17, scale=0.08, keep_transparent=False):
    """Give every parameter trained-like values, keyed by name so two models
    sharing parameter names get identical values. keep_transparent leaves
    the zero connector at zero."""
    for name, p in model.params.items():
        if keep_transparent and name in ("proj.zero_w", "proj.zero_b"):
            continue
        p.data = (Rng(seed, "randomize/" + name)
                  .normal(p.data.shape, std=scale, dtype=np.float64)
                  .astype(p.data.dtype))


def tiny_run_config(tmp_dir=None, **train_overrides) -> RunConfig:
    cfg = RunConfig.defaults()
    cfg.override("model", "image_size", 32)
    cfg.override("model", "base_channels", 16)
    cfg.override("model", "time_embed_dim", 64)
    cfg.override("train", "batch_size", 4)
    cfg.override("train", "steps", 4)
    cfg.override("train", "log_every", 0)
    cfg.override("sampler", "steps", 5)
    cfg.override("data", "n", 24)
    if tmp_dir is not None:
        cfg.override("data", "dir", str(tmp_dir / "data"))
        cfg.override("out", "dir", str(tmp_dir / "out"))
    for k, v in train_overrides.items():
        cfg.override("train", k, v)
    return cfg


@pytest.fixture
def rng():
    return Rng(123, "test")
