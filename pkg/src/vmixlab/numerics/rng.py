"""Deterministic random streams built on the counter-based Philox generator.

Every stream is identified by a (seed, path) pair. The path is a short
string such as "train/step42/noise"; it is hashed with 64-bit FNV-1a into
the Philox key, so adding or removing one consumer never shifts the draws
seen by any other consumer.
"""

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data) -> int:
    """64-bit FNV-1a hash of bytes or str."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


class Rng:
    """Named deterministic stream: same (seed, path) gives the same draws.

    Algorithm: Philox4x64 keyed with (seed, fnv1a64(path)); normals come
    from numpy's Generator on top of that counter-based stream.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed) & _MASK64
        self.path = path
        key = np.array([self.seed, fnv1a64(path)], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "Rng":
        """Independent substream; draws here never affect the parent."""
        return Rng(self.seed, self.path + "/" + name)

    def normal(self, shape, std=1.0, dtype=np.float32) -> np.ndarray:
        """Standard normals drawn in float64, scaled, then cast to dtype."""
        x = self._gen.standard_normal(size=shape)
        if std != 1.0:
            x = x * std
        return x.astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
