"""Deterministic, counter-based random streams with named substreams.

Every party and every physical process draws from its own substream so that a
run can be reproduced piecewise: Alice's choices do not shift when Bob's code
path changes, and a two-process run sees the same numbers as a loopback run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = ["RandomStream", "derive_stream"]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RandomStream:
    """A (seed, stream_id) pair naming one reproducible random sequence."""

    seed: int
    stream_id: str = ""

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    def key(self) -> int:
        """128-bit Philox key derived from the seed and the stream label."""
        h = hashlib.blake2b(digest_size=16, person=b"decoyqkd-stream")
        h.update(int(self.seed).to_bytes(8, "little"))
        h.update(self.stream_id.encode("utf-8"))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=self.key()))

    def child(self, label: str) -> "RandomStream":
        return derive_stream(self, label)

    def randbits(self, nbits: int) -> int:
        """First ``nbits`` of the stream as a non-negative integer."""
        nwords = (nbits + 63) // 64
        words = self.generator().integers(0, 1 << 64, size=nwords, dtype=np.uint64, endpoint=False)
        value = int.from_bytes(words.astype("<u8").tobytes(), "little")
        return value & ((1 << nbits) - 1)


def derive_stream(parent: RandomStream, label: str) -> RandomStream:
    """Substream of ``parent`` named ``label``.

    Labels are joined into a path, so ``derive_stream(derive_stream(s, "a"), "b")``
    is the stream ``a/b`` of ``s``. Slashes inside a label are rejected to keep
    paths unambiguous.
    """
    if "/" in label:
        raise ValueError("stream labels may not contain '/'")
    path = f"{parent.stream_id}/{label}" if parent.stream_id else label
    return RandomStream(parent.seed, path)
