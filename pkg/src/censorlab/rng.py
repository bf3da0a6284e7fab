"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, stream_id)``, so any
(seed, fold, epoch, role) combination can be addressed directly without
threading generator state through the program.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_hash(parent: int, labels: tuple) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(parent.to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Identical identifiers always give identical sequences. Streams derived
    with different labels are keyed differently and therefore independent.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= _MASK64 and 0 <= stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *labels) -> "RngStream":
        """Return a fresh stream keyed by this stream's id and ``labels``."""
        return RngStream(self.seed, _label_hash(self.stream_id, labels))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id:#x})"

    # thin conveniences over the numpy generator
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)
