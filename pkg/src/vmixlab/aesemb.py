"""Paired aesthetic label embeddings (AesEmb) and per-image selection.

The embedding is a 2N x d matrix holding, for each of N opposing label
pairs, the [CLS] vector of the positive label at row 2i and of its
rare-token negative identifier at row 2i+1. It is built once, cached to
disk with a fingerprint, and indexed per image by a polarity vector.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, StaleCacheError
from .numerics import fnv1a64
from .textenc import TextEncoder

AESEMB_MAGIC = b"AESB"
AESEMB_VERSION = 1


@dataclass(frozen=True)
class LabelPair:
    dimension: str
    positive: str
    negative_identifier: str


DEFAULT_LABEL_PAIRS = (
    LabelPair("color", "vibrant color", "[V1]"),
    LabelPair("lighting", "natural lighting", "[V2]"),
    LabelPair("composition", "proportional composition", "[V3]"),
    LabelPair("focus", "sharp focus", "[V4]"),
)


@dataclass
class AestheticAssignment:
    """Per-image polarity over the N label pairs: +1 keeps the positive."""

    polarity: np.ndarray = field(default_factory=lambda: np.ones(4, dtype=np.int8))

    def __post_init__(self):
        p = np.asarray(self.polarity, dtype=np.int8)
        if p.ndim != 1 or not np.all(np.abs(p) == 1):
            raise ConfigError("polarity must be a 1-D vector of +1/-1")
        self.polarity = p

    def __len__(self):
        return len(self.polarity)

    def to_string(self) -> str:
        return "".join("+" if v > 0 else "-" for v in self.polarity)

    @classmethod
    def from_string(cls, s: str) -> "AestheticAssignment":
        if not s or any(c not in "+-" for c in s):
            raise ConfigError(f"bad polarity string {s!r}")
        return cls(np.array([1 if c == "+" else -1 for c in s], dtype=np.int8))


def all_positive(n: int) -> AestheticAssignment:
    if n < 1:
        raise ConfigError("need at least one label pair")
    return AestheticAssignment(np.ones(n, dtype=np.int8))


def all_negative(n: int) -> AestheticAssignment:
    if n < 1:
        raise ConfigError("need at least one label pair")
    return AestheticAssignment(-np.ones(n, dtype=np.int8))


@dataclass
class AesEmb:
    matrix: np.ndarray          # (2N, d), rows [pos_1, neg_1, pos_2, neg_2, ...]
    pair_names: tuple
    fingerprint: int

    @property
    def n_pairs(self) -> int:
        return self.matrix.shape[0] // 2

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def aesemb_fingerprint(pairs, encoder_seed: int) -> int:
    parts = []
    for p in pairs:
        parts += [p.dimension, p.positive, p.negative_identifier]
    parts.append(str(encoder_seed))
    return fnv1a64("\x1f".join(parts))


def build_aesemb(pairs, enc: TextEncoder) -> AesEmb:
    """Encode each opposing pair to [CLS] vectors; positive at even rows."""
    pairs = tuple(pairs)
    if not pairs:
        raise ConfigError("need at least one label pair")
    dims = [p.dimension for p in pairs]
    rares = [p.negative_identifier for p in pairs]
    if len(set(dims)) != len(dims):
        raise ConfigError(f"duplicate dimension names: {dims}")
    if len(set(rares)) != len(rares):
        raise ConfigError(f"duplicate rare tokens: {rares}")
    registered = set(enc.vocab.rare_tokens)
    for p in pairs:
        if p.negative_identifier not in registered:
            raise ConfigError(f"{p.negative_identifier!r} is not a registered rare token")
        for w in p.positive.split():
            if w not in enc.vocab:
                raise ConfigError(f"label word {w!r} missing from vocabulary")
    rows = []
    for p in pairs:
        rows.append(enc.cls_of(p.positive))
        rows.append(enc.cls_of(p.negative_identifier))
    matrix = np.stack(rows).astype(np.float32)
    return AesEmb(matrix=matrix, pair_names=tuple(dims),
                  fingerprint=aesemb_fingerprint(pairs, enc.seed))


def select(aesemb: AesEmb, assignment: AestheticAssignment) -> np.ndarray:
    """Row i of the result is the pair-i row chosen by the polarity: (N, d)."""
    n = aesemb.n_pairs
    if len(assignment) != n:
        raise ConfigError(f"assignment length {len(assignment)} != {n} pairs")
    idx = 2 * np.arange(n) + (assignment.polarity < 0)
    return aesemb.matrix[idx]


def save_aesemb(aesemb: AesEmb, path):
    n, d = aesemb.n_pairs, aesemb.dim
    names = "\x1f".join(aesemb.pair_names).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(AESEMB_MAGIC)
        fh.write(struct.pack("<IIIQ", AESEMB_VERSION, n, d, aesemb.fingerprint))
        fh.write(struct.pack("<I", len(names)))
        fh.write(names)
        fh.write(aesemb.matrix.astype("<f4").tobytes())


def load_aesemb(path, expected_fingerprint: int | None = None) -> AesEmb:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != AESEMB_MAGIC:
        raise FormatError(f"not an AesEmb cache: bad magic {raw[:4]!r}")
    try:
        version, n, d, fp = struct.unpack_from("<IIIQ", raw, 4)
        (name_len,) = struct.unpack_from("<I", raw, 24)
        names = raw[28:28 + name_len].decode("utf-8").split("\x1f")
        body = raw[28 + name_len:]
        if version != AESEMB_VERSION:
            raise FormatError(f"unsupported AesEmb version {version}")
        if len(body) != 2 * n * d * 4 or len(names) != n:
            raise FormatError("AesEmb cache truncated or inconsistent")
        matrix = np.frombuffer(body, dtype="<f4").reshape(2 * n, d).copy()
    except struct.error as exc:
        raise FormatError("AesEmb cache truncated") from exc
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise StaleCacheError(
            f"AesEmb cache fingerprint {fp:#x} does not match configuration {expected_fingerprint:#x}")
    return AesEmb(matrix=matrix, pair_names=tuple(names), fingerprint=fp)
