"""Toeplitz hashing for verification and privacy amplification."""

import numpy as np
import pytest
from scipy import stats

from decoyqkd.hashing import (
    privacy_amplify,
    toeplitz_hash,
    toeplitz_seed_bits,
    verification_bits,
    verification_digest,
)


def _explicit(key, m, s):
    n = len(key)
    t = np.array([[s[i - j + n - 1] for j in range(n)] for i in range(m)], dtype=np.int64)
    return (t @ np.asarray(key, dtype=np.int64)) % 2


def test_matches_explicit_matrix():
    rng = np.random.default_rng(0)
    for n, m in [(1, 1), (5, 3), (64, 17), (300, 299), (1000, 1)]:
        key = rng.integers(0, 2, n)
        s = rng.integers(0, 2, n + m - 1)
        assert np.array_equal(toeplitz_hash(key, m, s), _explicit(key, m, s))


def test_chunked_product_matches(monkeypatch):
    import decoyqkd.hashing as h

    rng = np.random.default_rng(1)
    key = rng.integers(0, 2, 1000)
    s = rng.integers(0, 2, 1000 + 40 - 1)
    whole = toeplitz_hash(key, 40, s)
    monkeypatch.setattr(h, "_FFT_CHUNK", 128)
    assert np.array_equal(h.toeplitz_hash(key, 40, s), whole)


def test_linearity():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        l = int(rng.integers(0, n + 1))
        seed = int(rng.integers(0, 2**63))
        k1 = rng.integers(0, 2, n, dtype=np.uint8)
        k2 = rng.integers(0, 2, n, dtype=np.uint8)
        assert np.array_equal(privacy_amplify(k1 ^ k2, l, seed), privacy_amplify(k1, l, seed) ^ privacy_amplify(k2, l, seed))


def test_output_uniformity():
    rng = np.random.default_rng(3)
    weights = 1 << np.arange(8)
    values = []
    for i in range(10_000):
        key = rng.integers(0, 2, 256, dtype=np.uint8)
        values.append(int(privacy_amplify(key, 8, seed=17) @ weights))
    counts = np.bincount(values, minlength=256)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_determinism_and_seed_dependence():
    key = np.random.default_rng(4).integers(0, 2, 500, dtype=np.uint8)
    assert np.array_equal(privacy_amplify(key, 100, 9), privacy_amplify(key, 100, 9))
    assert not np.array_equal(privacy_amplify(key, 100, 9), privacy_amplify(key, 100, 10))


def test_lengths():
    key = np.ones(20, dtype=np.uint8)
    assert privacy_amplify(key, 0, 1).size == 0
    assert privacy_amplify(key, 20, 1).size == 20
    with pytest.raises(ValueError):
        privacy_amplify(key, 21, 1)
    with pytest.raises(ValueError):
        privacy_amplify(key, -1, 1)
    with pytest.raises(ValueError):
        toeplitz_hash(key, 3, np.zeros(5))
    with pytest.raises(ValueError):
        privacy_amplify([0, 2], 1, 1)


def test_seed_bit_count():
    assert toeplitz_seed_bits(1, 100, 34).size == 133
    assert toeplitz_seed_bits(1, 0, 0).size == 0


def test_verification_length():
    assert verification_bits(1e-10) == 34
    assert verification_bits(0.5) == 1
    assert verification_bits(2**-20) == 20
    assert verification_digest(np.zeros(0, dtype=np.uint8), 1e-10, 5).size == 34
    with pytest.raises(ValueError):
        verification_bits(1.0)
