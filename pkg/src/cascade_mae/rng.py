"""Counter-based random streams keyed by a root seed and a derivation path.

A stream never depends on how many draws were taken elsewhere: the Philox key
is a hash of ``seed`` and the full path, so ``derive(s, "client", 3)`` is the
same no matter when or where it is called.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: tuple[tuple[str, int], ...] = ()

    def derive(self, label: str, index: int = 0) -> "RngStream":
        return rng_derive(self, label, index)

    def key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<Q", self.seed & 0xFFFFFFFFFFFFFFFF))
        for label, index in self.path:
            raw = label.encode("utf-8")
            h.update(struct.pack("<I", len(raw)))
            h.update(raw)
            h.update(struct.pack("<q", index))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=self.key()))


def rng_derive(root: RngStream, label: str, index: int = 0) -> RngStream:
    if not label:
        raise ValueError("rng label must be non-empty")
    return RngStream(root.seed, root.path + ((label, int(index)),))


def as_stream(rng: RngStream | int) -> RngStream:
    return rng if isinstance(rng, RngStream) else RngStream(int(rng))
