"""Flat key=value run configuration with sections.

Unknown sections or keys are rejected. The resolved (defaults + overrides)
form is rendered canonically and embedded verbatim in every checkpoint and
report, so any artifact names the exact configuration that produced it.
"""

import configparser
import io
from dataclasses import dataclass, field

from .aesemb import LabelPair
from .errors import ConfigError
from .unet import UNetConfig

_DEFAULT_LABELS = (
    ("color", "vibrant color|[V1]"),
    ("lighting", "natural lighting|[V2]"),
    ("composition", "proportional composition|[V3]"),
    ("focus", "sharp focus|[V4]"),
)

# section -> key -> (type tag, default)
SCHEMA = {
    "model": {
        "image_size": ("int", 32),
        "base_channels": ("int", 64),
        "channel_mults": ("ints", (1, 2)),
        "attention_resolutions": ("ints", (16, 8)),
        "heads": ("int", 4),
        "time_embed_dim": ("int", 256),
        "groups": ("int", 8),
        "model_seed": ("int", 0),
    },
    "text": {
        "context_len": ("int", 16),
        "context_dim": ("int", 64),
        "encoder_seed": ("int", 7370),
    },
    "diffusion": {
        "timesteps": ("int", 1000),
        "beta_start": ("float", 1e-4),
        "beta_end": ("float", 0.02),
    },
    "sampler": {
        "steps": ("int", 25),
        "cfg_scale": ("float", 7.5),
        "lambda": ("float", 1.0),
        "eta": ("float", 0.0),
        "clip_x0": ("bool", True),
    },
    "train": {
        "seed": ("int", 0),
        "batch_size": ("int", 16),
        "steps": ("int", 2000),
        "lr": ("float", 1e-3),
        "weight_decay": ("float", 0.0),
        "p_drop": ("float", 0.1),
        "lora_rank": ("int", 4),
        "lora_alpha": ("float", 4.0),
        "log_every": ("int", 100),
        "checkpoint_every": ("int", 0),  # 0: only final
    },
    "data": {
        "n": ("int", 5000),
        "seed": ("int", 0),
        "positive_rate": ("float", 0.5),
        "dir": ("str", "data"),
    },
    "out": {
        "dir": ("str", "out"),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)   # (section, key) -> value
    labels: tuple = ()                           # tuple[LabelPair]

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    # -- construction -----------------------------------------------------

    @classmethod
    def defaults(cls) -> "RunConfig":
        values = {(s, k): v for s, keys in SCHEMA.items() for k, (_, v) in keys.items()}
        return cls(values=values, labels=_parse_labels(dict(_DEFAULT_LABELS)))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls.defaults()
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        label_overrides = None
        for section in parser.sections():
            if section == "labels":
                label_overrides = dict(parser.items(section))
                continue
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                kind, _ = SCHEMA[section][key]
                cfg.values[(section, key)] = _convert(kind, raw, section, key)
        if label_overrides is not None:
            cfg.labels = _parse_labels(label_overrides)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def override(self, section: str, key: str, value):
        if (section, key) not in self.values:
            raise ConfigError(f"unknown key [{section}] {key}")
        self.values[(section, key)] = value

    # -- rendering ----------------------------------------------------------

    def resolved_text(self) -> str:
        """Canonical rendering: sorted sections and keys, labels included."""
        out = io.StringIO()
        for section in sorted(SCHEMA):
            out.write(f"[{section}]\n")
            for key in sorted(SCHEMA[section]):
                out.write(f"{key} = {_render(self.values[(section, key)])}\n")
            out.write("\n")
        out.write("[labels]\n")
        for p in self.labels:
            out.write(f"{p.dimension} = {p.positive}|{p.negative_identifier}\n")
        return out.getvalue()

    # -- derived objects ------------------------------------------------------

    def unet_config(self, vmix: bool = True) -> UNetConfig:
        g = self.get
        return UNetConfig(
            image_size=g("model", "image_size"),
            in_channels=3,
            base_channels=g("model", "base_channels"),
            channel_mults=tuple(g("model", "channel_mults")),
            attention_resolutions=tuple(g("model", "attention_resolutions")),
            heads=g("model", "heads"),
            time_embed_dim=g("model", "time_embed_dim"),
            context_len=g("text", "context_len"),
            context_dim=g("text", "context_dim"),
            aes_pairs=len(self.labels),
            vmix=vmix,
            groups=g("model", "groups"),
            max_timestep=g("diffusion", "timesteps"),
        )

    def sampler_config(self):
        from .diffusion import SamplerConfig
        return SamplerConfig(steps=self.get("sampler", "steps"),
                             cfg_scale=self.get("sampler", "cfg_scale"),
                             lam=self.get("sampler", "lambda"),
                             eta=self.get("sampler", "eta"),
                             clip_x0=self.get("sampler", "clip_x0"))

    def schedule(self):
        from .diffusion import make_schedule
        return make_schedule(self.get("diffusion", "timesteps"),
                             self.get("diffusion", "beta_start"),
                             self.get("diffusion", "beta_end"))


def _convert(kind: str, raw: str, section: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_labels(entries: dict) -> tuple:
    pairs = []
    for dim, raw in entries.items():
        try:
            positive, rare = (s.strip() for s in raw.split("|"))
        except ValueError as exc:
            raise ConfigError(f"label {dim!r} must look like 'positive text|[Vk]'") from exc
        pairs.append(LabelPair(dim, positive, rare))
    if not pairs:
        raise ConfigError("at least one label pair required")
    return tuple(pairs)
