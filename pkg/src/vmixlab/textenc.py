"""Frozen toy text encoder.

A closed vocabulary plus a tiny 2-block transformer with constant-seeded
weights maps prompts to token embeddings. It stands in for a pretrained
text model: all we need downstream is a deterministic, semantically
non-degenerate map from strings to a (C, d) embedding and a [CLS] vector.
The encoder never receives gradients.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import Rng

PAD, CLS, EOS, UNK = "[PAD]", "[CLS]", "[EOS]", "[UNK]"
RARE_TOKEN_COUNT = 16

COLOR_WORDS = ["red", "green", "blue", "yellow"]
SHAPE_WORDS = ["circle", "square", "triangle"]
POSITION_WORDS = ["center", "offset"]
LABEL_WORDS = [
    "vibrant", "muted", "color",
    "natural", "flat", "lighting",
    "proportional", "loose", "composition",
    "sharp", "soft", "focus",
]

DEFAULT_ENCODER_SEED = 7370


def rare_token(i: int) -> str:
    return f"[V{i + 1}]"


class Vocabulary:
    """Closed token set with stable ids; rare tokens never appear in captions."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        for t in (PAD, CLS, EOS, UNK):
            if t not in self.index:
                raise ConfigError(f"missing reserved token {t}")

    @classmethod
    def default(cls) -> "Vocabulary":
        toks = [PAD, CLS, EOS, UNK]
        toks += [rare_token(i) for i in range(RARE_TOKEN_COUNT)]
        toks += COLOR_WORDS + SHAPE_WORDS + POSITION_WORDS + LABEL_WORDS
        return cls(toks)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def rare_tokens(self):
        return [t for t in self.tokens if t.startswith("[V") and t.endswith("]")]

    def is_rare(self, token: str) -> bool:
        return token in self.index and token in set(self.rare_tokens)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, t in enumerate(self.tokens):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    tok, idx = line.split("\t")
                except ValueError as exc:
                    raise FormatError(f"bad vocab line: {line!r}") from exc
                if int(idx) != len(tokens):
                    raise FormatError(f"non-sequential id in vocab: {line!r}")
                tokens.append(tok)
        return cls(tokens)


@dataclass
class TokenEmbeddings:
    tokens: np.ndarray  # (C, d)
    cls: np.ndarray     # (d,)


def _ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TextEncoder:
    """Embedding table + 2 frozen self-attention blocks, constant-seeded."""

    def __init__(self, vocab: Vocabulary, seq_len: int = 16, dim: int = 64,
                 heads: int = 4, seed: int = DEFAULT_ENCODER_SEED):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.vocab = vocab
        self.seq_len = seq_len
        self.dim = dim
        self.heads = heads
        self.seed = seed
        rng = Rng(seed, "textenc")
        d = dim
        self.emb = rng.child("emb").normal((len(vocab), d))
        pos = np.arange(seq_len)
        freqs = np.exp(-np.log(10000.0) * np.arange(d // 2) / (d // 2))
        ang = pos[:, None] * freqs[None, :]
        self.pos = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
        self.blocks = []
        for i in range(2):
            brng = rng.child(f"block{i}")
            blk = {
                "wq": brng.child("wq").normal((d, d), std=d ** -0.5),
                "wk": brng.child("wk").normal((d, d), std=d ** -0.5),
                "wv": brng.child("wv").normal((d, d), std=d ** -0.5),
                "wo": brng.child("wo").normal((d, d), std=d ** -0.5),
                "w1": brng.child("w1").normal((d, 2 * d), std=d ** -0.5),
                "b1": np.zeros(2 * d, dtype=np.float32),
                "w2": brng.child("w2").normal((2 * d, d), std=(2 * d) ** -0.5),
                "b2": np.zeros(d, dtype=np.float32),
            }
            self.blocks.append(blk)

    def tokenize(self, text: str):
        """[CLS] + words + [EOS], padded/truncated to exactly seq_len ids."""
        words = text.split()
        ids = [self.vocab.id_of(CLS)] + [self.vocab.id_of(w) for w in words]
        ids = ids[: self.seq_len - 1]
        ids.append(self.vocab.id_of(EOS))
        pad = self.vocab.id_of(PAD)
        while len(ids) < self.seq_len:
            ids.append(pad)
        return ids

    def encode(self, ids) -> TokenEmbeddings:
        if len(ids) != self.seq_len:
            raise ConfigError(f"encode expects exactly {self.seq_len} ids, got {len(ids)}")
        d, h = self.dim, self.heads
        dh = d // h
        x = self.emb[np.asarray(ids)] + self.pos
        for blk in self.blocks:
            xn = _ln(x)
            q = (xn @ blk["wq"]).reshape(self.seq_len, h, dh).transpose(1, 0, 2)
            k = (xn @ blk["wk"]).reshape(self.seq_len, h, dh).transpose(1, 0, 2)
            v = (xn @ blk["wv"]).reshape(self.seq_len, h, dh).transpose(1, 0, 2)
            attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
            mixed = (attn @ v).transpose(1, 0, 2).reshape(self.seq_len, d)
            x = x + mixed @ blk["wo"]
            xn = _ln(x)
            x = x + np.maximum(xn @ blk["w1"] + blk["b1"], 0.0) @ blk["w2"] + blk["b2"]
        x = _ln(x).astype(np.float32)
        return TokenEmbeddings(tokens=x, cls=x[0].copy())

    def encode_text(self, text: str) -> TokenEmbeddings:
        return self.encode(self.tokenize(text))

    def cls_of(self, label_text: str) -> np.ndarray:
        """[CLS]-position output for a label string; pure function of the text."""
        if not label_text:
            raise ConfigError("label text must be nonempty")
        return self.encode_text(label_text).cls
