"""Cascade reconciliation over an authenticated link.

Bob drives: he asks for the parity of ranges of Alice's (permuted) key and
corrects his own copy; Alice only answers. Every parity Alice sends is one
bit of leakage, so the leakage count is exact by construction.

Pass p splits the key, permuted by a seeded shuffle (identity for pass 0),
into blocks of k1 * 2^p bits. Odd blocks are bisected. Each flip toggles a
block parity in every earlier pass, and those blocks are searched again
(the cascade step). Binary searches of all odd blocks of one pass run in
lock step, so a pass costs about log2(block) round trips rather than one
per error. Blocks of the same pass are disjoint, so this batching finds the
same errors as a sequential search.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import RandomStream
from .transport import LinkClosed, MsgType, loopback_pair

__all__ = [
    "ReconciliationResult",
    "ReconciliationFailed",
    "initial_block_size",
    "cascade_alice",
    "cascade_bob",
    "cascade_reconcile",
]

_START, _TOP, _RANGES, _DONE = 0, 1, 2, 3


class ReconciliationFailed(Exception):
    """Leakage grew past the key length (abort: efficiency)."""


@dataclass
class ReconciliationResult:
    corrected_key: np.ndarray
    leakage_bits: int
    passes: int
    residual_error_detected: bool
    errors_corrected: int = 0
    rounds: int = 0


def initial_block_size(e_est: float, n: int) -> int:
    """First-pass block size 0.73 / e, kept within [2, n]."""
    if n <= 2:
        return max(n, 1)
    if e_est <= 0:
        return n
    return int(min(max(math.ceil(0.73 / e_est), 2), n))


def _permutation(seed: int, p: int, n: int) -> np.ndarray:
    if p == 0:
        return np.arange(n, dtype=np.int64)
    return RandomStream(int(seed), f"cascade/pass{p}").generator().permutation(n).astype(np.int64)


def _pack(bits: np.ndarray) -> bytes:
    return struct.pack("<I", bits.size) + np.packbits(bits.astype(np.uint8)).tobytes()


def _unpack(payload: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<I", payload)
    return np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=4), count=n)


def _block_starts(n: int, k: int) -> np.ndarray:
    return np.arange(0, n, k, dtype=np.int64)


def cascade_alice(key_a, ep, timeout: Optional[float] = None) -> int:
    """Answer parity queries until Bob is done; returns parity bits sent."""
    key = np.asarray(key_a, dtype=np.uint8)
    n = key.size
    seed = None
    prefix = {}
    sent = 0

    def prefix_of(p):
        if p not in prefix:
            perm = _permutation(seed, p, n)
            prefix[p] = np.concatenate([[0], np.cumsum(key[perm], dtype=np.int64)])
        return prefix[p]

    while True:
        msg = ep.recv(MsgType.EC_PARITY, timeout=timeout).payload
        op = msg[0]
        if op == _START:
            n_b, seed = struct.unpack_from("<QQ", msg, 1)
            if n_b != n:
                raise LinkClosed(f"key length mismatch: {n} vs {n_b}")
            continue
        if op == _DONE:
            return sent
        if seed is None:
            raise LinkClosed("parity query before start")
        if op == _TOP:
            p, k = struct.unpack_from("<HQ", msg, 1)
            starts = _block_starts(n, k)
            ends = np.minimum(starts + k, n)
        elif op == _RANGES:
            (p,) = struct.unpack_from("<H", msg, 1)
            arr = np.frombuffer(msg, dtype="<u4", offset=3).astype(np.int64)
            half = arr.size // 2
            starts, ends = arr[:half], arr[half:]
        else:
            raise LinkClosed(f"unknown reconciliation op {op}")
        c = prefix_of(p)
        parity = ((c[ends] - c[starts]) & 1).astype(np.uint8)
        ep.send(MsgType.EC_PARITY, _pack(parity))
        sent += parity.size


class _Pass:
    def __init__(self, p, k, n, seed):
        self.p = p
        self.k = k
        self.perm = _permutation(seed, p, n)
        self.inv = np.empty(n, dtype=np.int64)
        self.inv[self.perm] = np.arange(n, dtype=np.int64)
        self.starts = _block_starts(n, k)
        self.ends = np.minimum(self.starts + k, n)
        self.alice = None
        self.bob = None


def cascade_bob(
    key_b,
    e_bit_estimate: float,
    ep,
    seed: int = 0,
    min_passes: int = 4,
    max_passes: int = 16,
    timeout: Optional[float] = None,
) -> ReconciliationResult:
    """Correct ``key_b`` towards Alice's key; Alice must run ``cascade_alice``.

    After ``min_passes`` passes, further passes are run while the previous
    pass still corrected something, up to ``max_passes``.
    """
    key = np.array(key_b, dtype=np.uint8, copy=True)
    n = key.size
    leakage = 0
    rounds = 0
    corrected = 0

    def ask(payload: bytes) -> np.ndarray:
        nonlocal leakage, rounds
        ep.send(MsgType.EC_PARITY, payload)
        bits = _unpack(ep.recv(MsgType.EC_PARITY, timeout=timeout).payload)
        leakage += bits.size
        rounds += 1
        if leakage > n:
            ep.send(MsgType.EC_PARITY, bytes([_DONE]))
            raise ReconciliationFailed(f"leakage {leakage} exceeds key length {n}")
        return bits

    ep.send(MsgType.EC_PARITY, bytes([_START]) + struct.pack("<QQ", n, int(seed)))
    passes: list[_Pass] = []
    if n == 0:
        ep.send(MsgType.EC_PARITY, bytes([_DONE]))
        return ReconciliationResult(key, 0, 0, False)

    k1 = initial_block_size(e_bit_estimate, n)
    found_last = 0
    p = 0
    for p in range(max_passes):
        if p >= min_passes and found_last == 0:
            break
        ps = _Pass(p, min(k1 << p, n) if p < 62 else n, n, seed)
        ps.alice = ask(bytes([_TOP]) + struct.pack("<HQ", p, ps.k))
        ps.bob = (np.add.reduceat(key[ps.perm], ps.starts) & 1).astype(np.uint8)
        passes.append(ps)
        found = 0
        while True:
            target = None
            for q in passes:
                odd = np.flatnonzero(q.alice != q.bob)
                if odd.size:
                    target = (q, odd)
                    break
            if target is None:
                break
            q, odd = target
            flips = _bisect(q, odd, key, ask)
            key[flips] ^= 1
            for r in passes:
                np.bitwise_xor.at(r.bob, r.inv[flips] // r.k, 1)
            found += flips.size
        corrected += found
        found_last = found
    else:
        p = max_passes
    npasses = len(passes)
    residual = npasses == max_passes and found_last > 0
    ep.send(MsgType.EC_PARITY, bytes([_DONE]))
    return ReconciliationResult(key, leakage, npasses, residual, corrected, rounds)


def _bisect(ps: _Pass, blocks: np.ndarray, key: np.ndarray, ask) -> np.ndarray:
    """Locate one error in each odd block of pass ``ps``; returns key positions."""
    c = np.concatenate([[0], np.cumsum(key[ps.perm], dtype=np.int64)])
    lo = ps.starts[blocks].copy()
    hi = ps.ends[blocks].copy()
    while True:
        active = hi - lo > 1
        if not active.any():
            break
        s, e = lo[active], hi[active]
        mid = (s + e) // 2
        payload = bytes([_RANGES]) + struct.pack("<H", ps.p) + np.concatenate([s, mid]).astype("<u4").tobytes()
        alice = ask(payload)
        bob = (c[mid] - c[s]) & 1
        left = alice != bob
        lo[active] = np.where(left, s, mid)
        hi[active] = np.where(left, mid, e)
    return ps.perm[lo]


def cascade_reconcile(key_a, key_b, e_bit_estimate: float, link=None, seed: int = 0, **kw) -> ReconciliationResult:
    """Run both roles: Alice on a helper thread, Bob on the caller's.

    ``link`` is an (alice_endpoint, bob_endpoint) pair; a loopback pair is
    made if omitted.
    """
    key_a = np.asarray(key_a, dtype=np.uint8)
    key_b = np.asarray(key_b, dtype=np.uint8)
    if key_a.size != key_b.size:
        raise ValueError("keys must have equal length")
    a_ep, b_ep = link if link is not None else loopback_pair(b"cascade")
    box = {}

    def alice():
        try:
            box["sent"] = cascade_alice(key_a, a_ep)
        except Exception as exc:  # surfaced below
            box["error"] = exc

    t = threading.Thread(target=alice, daemon=True)
    t.start()
    try:
        res = cascade_bob(key_b, e_bit_estimate, b_ep, seed=seed, **kw)
    finally:
        t.join()
    if "error" in box:
        raise box["error"]
    assert box["sent"] == res.leakage_bits
    return res
