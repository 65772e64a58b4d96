"""Checkpoint format: resolved config text, architecture fingerprint,
parameter table, optimizer state, and step counter. Reloading resumes
training with bit-identical draws and updates."""

import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import ConfigError, FormatError
from .tensorio import read_table, write_table
from .unet import UNet

CKPT_MAGIC = b"VMCK"
CKPT_VERSION = 1


@dataclass
class CheckpointData:
    config_text: str
    fingerprint: int
    step: int
    tensors: dict        # parameter name -> array (includes adapters if any)
    adam_step: int
    adam_m: dict
    adam_v: dict

    @property
    def has_vmix(self) -> bool:
        return any(n.startswith("proj.") for n in self.tensors)

    @property
    def has_lora(self) -> bool:
        return any(n.startswith("lora.") for n in self.tensors)

    @property
    def lora_alpha(self) -> float | None:
        t = self.tensors.get("meta.lora_alpha")
        return float(t[0]) if t is not None else None


def save_checkpoint(path, model: UNet, config_text: str, step: int,
                    optimizer=None, lora_alpha: float | None = None):
    tensors = {n: p.data for n, p in model.params.items()}
    if lora_alpha is not None:
        tensors["meta.lora_alpha"] = np.array([lora_alpha], dtype=np.float32)
    raw_cfg = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(raw_cfg)))
        fh.write(raw_cfg)
        fh.write(struct.pack("<QQ", model.fingerprint, step))
        write_table(fh, tensors)
        if optimizer is None:
            fh.write(struct.pack("<Q", 0))
        else:
            fh.write(struct.pack("<Q", optimizer.t))
            write_table(fh, {"m." + n: v for n, v in optimizer.m.items()})
            write_table(fh, {"v." + n: v for n, v in optimizer.v.items()})


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"not a checkpoint: bad magic {raw[:4]!r}")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack_from("<I", raw, 8)
        config_text = raw[12:12 + cfg_len].decode("utf-8")
        off = 12 + cfg_len
        fingerprint, step = struct.unpack_from("<QQ", raw, off)
        off += 16
        tensors, off = read_table(raw, off)
        (adam_step,) = struct.unpack_from("<Q", raw, off)
        off += 8
        adam_m, adam_v = {}, {}
        if adam_step:
            m_raw, off = read_table(raw, off)
            v_raw, off = read_table(raw, off)
            adam_m = {k.removeprefix("m."): v for k, v in m_raw.items()}
            adam_v = {k.removeprefix("v."): v for k, v in v_raw.items()}
    except struct.error as exc:
        raise FormatError("checkpoint truncated") from exc
    return CheckpointData(config_text=config_text, fingerprint=fingerprint, step=step,
                          tensors=tensors, adam_step=adam_step, adam_m=adam_m,
                          adam_v=adam_v)


def build_model(ckpt: CheckpointData, dtype=np.float32) -> UNet:
    """Reconstruct the exact model a checkpoint was saved from."""
    from . import lora as lora_mod

    run_cfg = RunConfig.from_text(ckpt.config_text)
    model = UNet(run_cfg.unet_config(vmix=ckpt.has_vmix),
                 seed=run_cfg.get("model", "model_seed"), dtype=dtype)
    if model.fingerprint != ckpt.fingerprint:
        raise ConfigError("checkpoint fingerprint does not match its own config; file damaged?")
    state = {n: t for n, t in ckpt.tensors.items() if not n.startswith("meta.")}
    if ckpt.has_lora:
        lora_names = [n for n in state if n.startswith("lora.")]
        layer_names = sorted({n.removeprefix("lora.").rsplit(".", 1)[0] for n in lora_names})
        rank = state[f"lora.{layer_names[0]}.A"].shape[0]
        alpha = ckpt.lora_alpha
        if alpha is None:
            raise FormatError("checkpoint has adapter factors but no meta.lora_alpha")
        lora_mod.attach(model, targets=layer_names, rank=rank, alpha=alpha)
    model.load_state(state)
    return model
