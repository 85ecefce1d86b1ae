"""Cascade error correction: correctness and exact leakage."""

import math

import numpy as np
import pytest

from decoyqkd.cascade import ReconciliationFailed, cascade_reconcile, initial_block_size
from decoyqkd.security import binary_entropy


def _top_parities(n, k1, passes):
    return sum(math.ceil(n / min(k1 * 2**p, n)) for p in range(passes))


def test_block_size():
    assert initial_block_size(0.02, 10**6) == 37
    assert initial_block_size(0.0, 100) == 100
    assert initial_block_size(0.9, 100) == 2
    assert initial_block_size(0.01, 10) == 10


def test_identical_keys_leak_only_top_level():
    key = np.random.default_rng(0).integers(0, 2, 10_000, dtype=np.uint8)
    r = cascade_reconcile(key, key.copy(), 0.02, seed=1)
    assert np.array_equal(r.corrected_key, key)
    assert r.errors_corrected == 0
    assert r.leakage_bits == _top_parities(10_000, initial_block_size(0.02, 10_000), r.passes)


def test_single_flip_is_cheap():
    rng = np.random.default_rng(1)
    n = 10_000
    for trial in range(20):
        a = rng.integers(0, 2, n, dtype=np.uint8)
        b = a.copy()
        b[rng.integers(0, n)] ^= 1
        r = cascade_reconcile(a, b, 0.01, seed=trial)
        k1 = initial_block_size(0.01, n)
        assert np.array_equal(r.corrected_key, a)
        assert r.errors_corrected == 1
        top = _top_parities(n, k1, r.passes)
        assert r.leakage_bits <= 2 * (math.ceil(math.log2(k1)) + r.passes) + top


def test_corrects_random_errors():
    rng = np.random.default_rng(2)
    for e in (0.005, 0.02, 0.05, 0.1):
        a = rng.integers(0, 2, 20_000, dtype=np.uint8)
        b = a ^ (rng.random(a.size) < e).astype(np.uint8)
        r = cascade_reconcile(a, b, e, seed=3)
        assert np.array_equal(r.corrected_key, a)
        assert r.errors_corrected == int(np.sum(a != b))


def test_efficiency_at_two_percent():
    rng = np.random.default_rng(3)
    n = 10**6
    ratios = []
    for s in range(100):
        a = rng.integers(0, 2, n, dtype=np.uint8)
        b = a ^ (rng.random(n) < 0.02).astype(np.uint8)
        r = cascade_reconcile(a, b, 0.02, seed=s)
        assert np.array_equal(r.corrected_key, a)
        ratios.append(r.leakage_bits / (n * binary_entropy(0.02)))
    assert np.mean(ratios) <= 1.25


def test_leakage_past_key_length_fails():
    rng = np.random.default_rng(4)
    a = rng.integers(0, 2, 2000, dtype=np.uint8)
    b = rng.integers(0, 2, 2000, dtype=np.uint8)
    with pytest.raises(ReconciliationFailed):
        cascade_reconcile(a, b, 0.01, seed=0)


def test_length_mismatch():
    with pytest.raises(ValueError):
        cascade_reconcile(np.zeros(5, np.uint8), np.zeros(6, np.uint8), 0.01)


def test_tiny_keys():
    # one bit cannot be corrected without disclosing more than the key
    with pytest.raises(ReconciliationFailed):
        cascade_reconcile(np.array([1], np.uint8), np.array([0], np.uint8), 0.02)
    a = np.random.default_rng(5).integers(0, 2, 64, dtype=np.uint8)
    b = a.copy()
    b[10] ^= 1
    assert np.array_equal(cascade_reconcile(a, b, 0.02).corrected_key, a)
