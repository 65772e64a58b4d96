"""AdamW and the two training stages.

Stage "base" trains the whole content-conditioned denoiser from scratch;
it stands in for the pretrained model the adapter regime assumes. The
finetune arms freeze that base and train only adapters: "full" is
projection + aesthetic values + low-rank factors, "no-lora" drops the
factors, "no-vmix" drops the aesthetic branch and keeps the factors.

Every step draws from a stream keyed by (seed, arm, step index), so a
resumed run replays the exact draws of an unbroken one.
"""

import os
import time
from dataclasses import dataclass

import numpy as np

from . import lora as lora_mod
from .aesemb import aesemb_fingerprint, build_aesemb, load_aesemb
from .checkpoint import CheckpointData, build_model, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import TrainBatch, training_loss
from .errors import ConfigError
from .numerics import Rng, Tensor
from .synthdata import load_manifest, read_ppm
from .textenc import TextEncoder, Vocabulary
from .unet import UNet

ARMS = ("base", "full", "no-lora", "no-vmix")


class AdamW:
    """Decoupled weight decay Adam over the trainable parameters."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            v = self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            data = p.data
            if self.weight_decay:
                data = data - self.lr * self.weight_decay * data
            p.data = (data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def load_state(self, adam_step: int, m: dict, v: dict):
        if set(m) != set(self.params):
            raise ConfigError("optimizer state does not cover the trainable parameters")
        self.t = adam_step
        self.m = {n: arr.astype(np.float32) for n, arr in m.items()}
        self.v = {n: arr.astype(np.float32) for n, arr in v.items()}


@dataclass
class DatasetArrays:
    images: np.ndarray     # (n, H, W, 3) float32 in [-1, 1]
    content: np.ndarray    # (n, C, d)
    polarity: np.ndarray   # (n, N) int8


def load_dataset_arrays(data_dir, enc: TextEncoder) -> DatasetArrays:
    rows = load_manifest(data_dir)
    cache = {}
    images, content, polarity = [], [], []
    for path, caption, assignment in rows:
        if caption not in cache:
            cache[caption] = enc.encode_text(caption).tokens
        images.append(read_ppm(path) * 2.0 - 1.0)
        content.append(cache[caption])
        polarity.append(assignment.polarity)
    return DatasetArrays(images=np.stack(images).astype(np.float32),
                         content=np.stack(content).astype(np.float32),
                         polarity=np.stack(polarity))


def build_text_encoder(run_cfg: RunConfig) -> TextEncoder:
    return TextEncoder(Vocabulary.default(),
                       seq_len=run_cfg.get("text", "context_len"),
                       dim=run_cfg.get("text", "context_dim"),
                       seed=run_cfg.get("text", "encoder_seed"))


def infer_arm(ckpt: CheckpointData) -> str:
    if ckpt.has_vmix and ckpt.has_lora:
        return "full"
    if ckpt.has_vmix:
        return "no-lora"
    if ckpt.has_lora:
        return "no-vmix"
    return "base"


def _build_arm_model(run_cfg: RunConfig, arm: str, base_ckpt_path):
    vmix = arm in ("full", "no-lora")
    model = UNet(run_cfg.unet_config(vmix=vmix), seed=run_cfg.get("model", "model_seed"))
    lora_alpha = None
    if arm == "base":
        return model, lora_alpha
    if base_ckpt_path is None:
        raise ConfigError(f"arm {arm!r} finetunes a frozen base: pass the base checkpoint")
    base_ckpt = load_checkpoint(base_ckpt_path)
    if base_ckpt.fingerprint != model.fingerprint:
        raise ConfigError("base checkpoint architecture does not match this config")
    if base_ckpt.has_vmix or base_ckpt.has_lora:
        raise ConfigError("base checkpoint must be a content-only model")
    for name, arr in base_ckpt.tensors.items():
        model.params[name].data = arr.astype(model.dtype)
    if arm in ("full", "no-vmix"):
        lora_alpha = run_cfg.get("train", "lora_alpha")
        lora_mod.attach(model, rank=run_cfg.get("train", "lora_rank"), alpha=lora_alpha)
    model.set_finetune_mode(True)
    return model, lora_alpha


def run_training(run_cfg: RunConfig, arm: str, out_dir, base_ckpt_path=None,
                 resume_path=None, log=print, max_steps=None):
    """Train one arm to [train].steps; returns (checkpoint_path, loss_history)."""
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}; expected one of {ARMS}")
    os.makedirs(out_dir, exist_ok=True)
    sched = run_cfg.schedule()
    enc = build_text_encoder(run_cfg)
    data_dir = run_cfg.get("data", "dir")

    expected_fp = aesemb_fingerprint(run_cfg.labels, enc.seed)
    aes_path = os.path.join(data_dir, "aesemb.bin")
    if os.path.exists(aes_path):
        aes = load_aesemb(aes_path, expected_fingerprint=expected_fp)  # stale cache refuses
    elif arm in ("full", "no-lora"):
        raise ConfigError(f"aesthetic embedding cache missing: {aes_path} (run init-aesemb)")
    else:
        aes = build_aesemb(run_cfg.labels, enc)
    data = load_dataset_arrays(data_dir, enc)
    uncond = enc.encode_text("").tokens.astype(np.float32)

    if resume_path is not None:
        ckpt = load_checkpoint(resume_path)
        if infer_arm(ckpt) != arm:
            raise ConfigError(f"checkpoint holds arm {infer_arm(ckpt)!r}, not {arm!r}")
        model = build_model(ckpt)
        lora_alpha = ckpt.lora_alpha
        if arm == "base":
            for p in model.params.values():
                p.requires_grad = True
        else:
            model.set_finetune_mode(True)
        start_step = ckpt.step
    else:
        model, lora_alpha = _build_arm_model(run_cfg, arm, base_ckpt_path)
        start_step = 0

    optimizer = AdamW(model.params, lr=run_cfg.get("train", "lr"),
                      weight_decay=run_cfg.get("train", "weight_decay"))
    if not optimizer.params:
        raise ConfigError("nothing to train in this arm")
    if resume_path is not None and ckpt.adam_step:
        optimizer.load_state(ckpt.adam_step, ckpt.adam_m, ckpt.adam_v)

    seed = run_cfg.get("train", "seed")
    batch_size = run_cfg.get("train", "batch_size")
    p_drop = run_cfg.get("train", "p_drop")
    total = run_cfg.get("train", "steps") if max_steps is None else max_steps
    log_every = run_cfg.get("train", "log_every")
    ckpt_every = run_cfg.get("train", "checkpoint_every")
    cfg_text = run_cfg.resolved_text()
    n = data.images.shape[0]
    use_aes = model.proj is not None

    losses = []
    t0 = time.time()
    final_path = os.path.join(out_dir, f"{arm}.vmck")
    for step in range(start_step, total):
        rng = Rng(seed, f"train/{arm}/step{step}")
        idx = rng.child("batch").integers(0, n, batch_size)
        batch = TrainBatch(images=data.images[idx], content=data.content[idx],
                           polarity=data.polarity[idx] if use_aes else None)
        loss = training_loss(batch, model, aes, rng.child("loss"), sched, uncond,
                             p_drop=p_drop, lam=1.0)
        loss.backward()
        optimizer.step()
        optimizer.zero_grad()
        losses.append(loss.item())
        done = step + 1
        if log_every and done % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            log(f"[{arm}] step {done}/{total} loss {recent:.4f} "
                f"({(time.time() - t0) / done:.2f}s/step)")
        if ckpt_every and done % ckpt_every == 0 and done < total:
            save_checkpoint(os.path.join(out_dir, f"{arm}_{done:06d}.vmck"),
                            model, cfg_text, done, optimizer, lora_alpha)
    save_checkpoint(final_path, model, cfg_text, total, optimizer, lora_alpha)
    return final_path, losses
