"""Low-rank adapters on linear and conv layers, and the extractable plugin.

Adapters add (alpha/r) * B @ A to a frozen layer weight; B starts at zero
so attaching is output-transparent. The plugin file carries every learned
tensor (projection weights, aesthetic values, adapter factors) so a
pristine base model plus the plugin reproduces the finetuned model.
"""

import fnmatch
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .tensorio import read_table, write_table
from .unet import Conv, Linear, UNet

PLUGIN_MAGIC = b"VMIX"
PLUGIN_VERSION = 1

DEFAULT_TARGETS = (
    "*.self_q", "*.self_k", "*.self_v",
    "*.cross_q", "*.cross_kc", "*.cross_vc",
    "*.conv1", "*.conv2",
)


def _fan_shapes(layer):
    if isinstance(layer, Linear):
        return layer.d_in, layer.d_out
    if isinstance(layer, Conv):
        return layer.c_in * layer.kernel * layer.kernel, layer.c_out
    raise ConfigError(f"layer {layer!r} cannot take an adapter")


@dataclass
class LoraAdapter:
    rank: int
    alpha: float
    layer_names: tuple

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def attach(model: UNet, targets=DEFAULT_TARGETS, rank: int = 4, alpha: float = 4.0,
           init_std: float = 0.02) -> LoraAdapter:
    """Attach rank-r adapters to every layer matching the target patterns."""
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    if any(n.startswith("lora.") for n in model.params):
        raise ConfigError("adapters already attached")
    alpha = float(np.float32(alpha))  # quantized so plugin round-trips are exact
    names = sorted(model.store.layers)
    selected = []
    for pat in targets:
        hits = fnmatch.filter(names, pat)
        if not hits:
            raise ConfigError(f"adapter target {pat!r} matches no layer")
        selected += hits
    selected = sorted(set(selected))
    scale = alpha / rank
    for name in selected:
        layer = model.store.layers[name]
        fan_in, fan_out = _fan_shapes(layer)
        a = model.store.normal(f"lora.{name}.A", (rank, fan_in), std=init_std)
        b = model.store.zeros(f"lora.{name}.B", (fan_out, rank))
        layer.lora = (a, b, scale)
    return LoraAdapter(rank=rank, alpha=alpha, layer_names=tuple(selected))


def detach(model: UNet):
    """Remove all adapters; the model computes exactly as never-attached."""
    for name, layer in model.store.layers.items():
        layer.lora = None
    for pname in [n for n in model.params if n.startswith("lora.")]:
        del model.store.params[pname]


def merge_weights(w: np.ndarray, a: np.ndarray, b: np.ndarray, scale: float) -> np.ndarray:
    """W' = W + scale * B @ A, for a layer weight of any rank."""
    delta = scale * (b @ a)
    if w.ndim == 2:  # stored (d_in, d_out); delta is (d_out, d_in)
        if delta.T.shape != w.shape:
            raise ConfigError(f"adapter shapes {a.shape}/{b.shape} do not fit weight {w.shape}")
        return w + delta.T.astype(w.dtype)
    if delta.reshape(-1).size != w.size:
        raise ConfigError(f"adapter shapes {a.shape}/{b.shape} do not fit weight {w.shape}")
    return w + delta.reshape(w.shape).astype(w.dtype)


def merged_state(model: UNet) -> dict:
    """Base-shaped state dict with every adapter folded into its layer weight."""
    state = {}
    for name, p in model.params.items():
        if name.startswith("lora."):
            continue
        state[name] = p.data.copy()
    for lname, layer in model.store.layers.items():
        if getattr(layer, "lora", None) is not None:
            a, b, scale = layer.lora
            state[lname + ".w"] = merge_weights(state[lname + ".w"], a.data, b.data, scale)
    return state


# -- plugin file ---------------------------------------------------------


def extract_plugin(model: UNet, path):
    """Write projection weights, aesthetic values, and adapter factors."""
    tensors = {n: p.data for n, p in model.params.items() if model.is_adapter_param(n)}
    if not any(n.startswith("proj.") for n in tensors):
        raise ConfigError("model has no aesthetic branch to extract")
    lora_layers = {n for n in tensors if n.startswith("lora.")}
    if lora_layers:
        some = next(iter(lora_layers)).rsplit(".", 1)[0].removeprefix("lora.")
        _, _, scale = model.store.layers[some].lora
        rank = model.params[f"lora.{some}.A"].shape[0]
        tensors["meta.lora_alpha"] = np.array([scale * rank], dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(PLUGIN_MAGIC)
        fh.write(struct.pack("<IQ", PLUGIN_VERSION, model.fingerprint))
        write_table(fh, tensors)


def apply_plugin(model: UNet, path, strip_lora: bool = False):
    """Load a plugin onto a pristine base model (must carry the aesthetic branch)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PLUGIN_MAGIC:
        raise FormatError(f"not a plugin file: bad magic {raw[:4]!r}")
    try:
        version, fingerprint = struct.unpack_from("<IQ", raw, 4)
    except struct.error as exc:
        raise FormatError("plugin header truncated") from exc
    if version != PLUGIN_VERSION:
        raise FormatError(f"unsupported plugin version {version}")
    if fingerprint != model.fingerprint:
        raise ConfigError(
            f"plugin fingerprint {fingerprint:#x} does not match model {model.fingerprint:#x}")
    tensors, _ = read_table(raw, 16)

    alpha = tensors.pop("meta.lora_alpha", None)
    lora_entries = {n: t for n, t in tensors.items() if n.startswith("lora.")}
    plain = {n: t for n, t in tensors.items() if not n.startswith("lora.")}

    for name, arr in plain.items():
        if name not in model.params:
            raise ConfigError(f"plugin tensor {name!r} has no target in this model "
                              "(was the base built with the aesthetic branch?)")
        if arr.shape != model.params[name].data.shape:
            raise ConfigError(f"plugin tensor {name!r} shape {arr.shape} mismatched")
        model.params[name].data = arr.astype(model.dtype)

    if strip_lora or not lora_entries:
        return None
    layer_names = sorted({n.removeprefix("lora.").rsplit(".", 1)[0] for n in lora_entries})
    rank = lora_entries[f"lora.{layer_names[0]}.A"].shape[0]
    adapter = attach(model, targets=layer_names, rank=rank, alpha=float(alpha[0]))
    for n, arr in lora_entries.items():
        model.params[n].data = arr.astype(model.dtype)
    return adapter
