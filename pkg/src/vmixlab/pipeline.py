"""ModelBundle: a denoiser plus everything needed to sample from it."""

from dataclasses import dataclass, field

import numpy as np

from .aesemb import AesEmb, AestheticAssignment, all_positive, build_aesemb, select
from .checkpoint import build_model, load_checkpoint
from .config import RunConfig
from .diffusion import DiffusionSchedule, SamplerConfig, ddim_sample
from .errors import ConfigError
from .textenc import TextEncoder
from .train import build_text_encoder
from .unet import UNet


@dataclass
class ModelBundle:
    model: UNet
    sched: DiffusionSchedule
    enc: TextEncoder
    aes: AesEmb
    run_cfg: RunConfig
    _cache: dict = field(default_factory=dict)

    @classmethod
    def from_checkpoint(cls, path, dtype=np.float32) -> "ModelBundle":
        ckpt = load_checkpoint(path)
        run_cfg = RunConfig.from_text(ckpt.config_text)
        model = build_model(ckpt, dtype=dtype)
        enc = build_text_encoder(run_cfg)
        aes = build_aesemb(run_cfg.labels, enc)
        return cls(model=model, sched=run_cfg.schedule(), enc=enc, aes=aes, run_cfg=run_cfg)

    @classmethod
    def fresh(cls, run_cfg: RunConfig, vmix: bool = True) -> "ModelBundle":
        model = UNet(run_cfg.unet_config(vmix=vmix), seed=run_cfg.get("model", "model_seed"))
        enc = build_text_encoder(run_cfg)
        aes = build_aesemb(run_cfg.labels, enc)
        return cls(model=model, sched=run_cfg.schedule(), enc=enc, aes=aes, run_cfg=run_cfg)

    def embed(self, text: str) -> np.ndarray:
        if text not in self._cache:
            self._cache[text] = self.enc.encode_text(text).tokens.astype(np.float32)
        return self._cache[text]

    def default_sampler_cfg(self) -> SamplerConfig:
        return self.run_cfg.sampler_config()

    def resolve_assignment(self, assignment) -> AestheticAssignment:
        if assignment is None:
            return all_positive(self.aes.n_pairs)  # the inference default
        if isinstance(assignment, str):
            return AestheticAssignment.from_string(assignment)
        return assignment

    def sample(self, prompts, assignment=None, seed: int = 0, sampler_cfg=None,
               baseline: bool = False, attn_probe=None) -> np.ndarray:
        """Images in [0, 1], shape (B, H, W, 3); deterministic per seed.

        assignment: None (all-positive default), a polarity string, or an
        AestheticAssignment; shared by the whole batch. baseline=True skips
        the aesthetic branch entirely (the content-only path).
        """
        if isinstance(prompts, str):
            prompts = [prompts]
        cfg = sampler_cfg if sampler_cfg is not None else self.default_sampler_cfg()
        if cfg.steps > self.sched.timesteps:
            raise ConfigError("sampler steps exceed the schedule length")
        content = np.stack([self.embed(p) for p in prompts])
        f_t = None
        if self.model.proj is not None and not baseline:
            rows = select(self.aes, self.resolve_assignment(assignment))
            f_t = np.broadcast_to(rows, (len(prompts),) + rows.shape).copy()
        uncond = self.embed("")
        imgs = ddim_sample(self.model, content, f_t, uncond, cfg, self.sched,
                           seed=seed, baseline=baseline, attn_probe=attn_probe)
        return np.clip((imgs + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
