"""Seeded Toeplitz hashing: key verification and privacy amplification.

An m x n binary Toeplitz matrix is fixed by m + n - 1 bits s, with
T[i, j] = s[i - j + n - 1]. The family is two-universal: for any pair of
distinct inputs the collision probability over s is exactly 2^-m. The product
is a convolution, so it is evaluated with an FFT and reduced mod 2.

The s bits are expanded from a short public seed with a counter-based
generator, so only the seed crosses the link. Two-universality then holds
for the expanded bits, not over the seed itself.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

from .rng import RandomStream

__all__ = [
    "as_bits",
    "toeplitz_seed_bits",
    "toeplitz_hash",
    "verification_bits",
    "verification_digest",
    "privacy_amplify",
]

# Float FFT convolution is exact after rounding while the largest possible
# sum (the shorter operand length) stays far below 2^52; beyond this length
# we fall back to chunking the key.
_FFT_CHUNK = 1 << 22


def as_bits(key) -> np.ndarray:
    bits = np.asarray(key, dtype=np.uint8)
    if bits.ndim != 1:
        raise ValueError("keys are one-dimensional bit arrays")
    if bits.size and bits.max() > 1:
        raise ValueError("keys must contain only 0 and 1")
    return bits


def toeplitz_seed_bits(seed: int, n_in: int, n_out: int, label: str = "toeplitz") -> np.ndarray:
    """The m + n - 1 defining bits of a Toeplitz matrix, expanded from ``seed``."""
    n = max(n_in + n_out - 1, 0)
    g = RandomStream(int(seed), label).generator()
    return g.integers(0, 2, size=n, dtype=np.uint8)


def toeplitz_hash(key, out_len: int, seed_bits) -> np.ndarray:
    """Multiply ``key`` by the Toeplitz matrix defined by ``seed_bits`` over GF(2)."""
    key = as_bits(key)
    n, m = key.size, int(out_len)
    if m < 0:
        raise ValueError("output length must be non-negative")
    if m == 0 or n == 0:
        return np.zeros(m, dtype=np.uint8)
    s = np.asarray(seed_bits, dtype=np.uint8)
    if s.size != n + m - 1:
        raise ValueError(f"need {n + m - 1} seed bits, got {s.size}")
    acc = np.zeros(m, dtype=np.int64)
    # (T k)_i = sum_j s[i - j + n - 1] k_j, i.e. entry i + n - 1 of s * k.
    for lo in range(0, n, _FFT_CHUNK):
        chunk = key[lo : lo + _FFT_CHUNK].astype(np.float64)
        c = chunk.size
        if not chunk.any():
            continue
        # columns lo..lo+c-1 use seed bits s[i - j + n - 1] for those j
        seg = s[n - lo - c : n - lo - c + m + c - 1].astype(np.float64)
        conv = fftconvolve(seg, chunk)
        acc += np.rint(conv[c - 1 : c - 1 + m]).astype(np.int64)
    return (acc & 1).astype(np.uint8)


def verification_bits(eps_cor: float) -> int:
    """Digest length ceil(log2(1/eps_cor))."""
    if not 0 < eps_cor < 1:
        raise ValueError("eps_cor must lie in (0, 1)")
    return math.ceil(math.log2(1.0 / eps_cor) - 1e-12)


def verification_digest(key, eps_cor: float, seed: int) -> np.ndarray:
    key = as_bits(key)
    m = verification_bits(eps_cor)
    return toeplitz_hash(key, m, toeplitz_seed_bits(seed, key.size, m, "verify"))


def privacy_amplify(key, l: int, seed: int) -> np.ndarray:
    """Compress ``key`` to ``l`` bits with a seeded Toeplitz matrix."""
    key = as_bits(key)
    if l < 0 or l > key.size:
        raise ValueError(f"output length {l} outside [0, {key.size}]")
    if l == 0:
        return np.zeros(0, dtype=np.uint8)
    return toeplitz_hash(key, l, toeplitz_seed_bits(seed, key.size, l, "amplify"))
