"""The two-party session: collection, sifting, estimation, correction,
verification and privacy amplification over an authenticated link.

Each party is a single-threaded state machine that talks to its peer only
through an :class:`~decoyqkd.transport.Endpoint`. The simulated quantum
channel is deterministic in the session seed, so each party runs its own
replica of it and reads only its own columns: Alice her bases, bits and
intensities, Bob his bases and outcomes. Control settings that move the
physics (the feedback angle) are exchanged in the clear, so both replicas
stay in step in a single process and across two processes alike.

Who talks when
--------------
Per block of pulses: Bob announces his detection indices and bases, Alice
answers with her bases and intensities, then each reveals the bits needed
for the public statistics (Alice: her bit on mismatched-basis rounds; Bob:
his X-basis outcomes). Z-basis bits of key-set rounds are never sent. Bob
closes the block with a digest of his set memberships that Alice checks.

Decisions both parties compute identically from public data (security
threshold, insufficient data, zero key length) are announced by Alice with
ABORT; Bob waits for it so both transcripts agree.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cascade import ReconciliationFailed, ReconciliationResult, cascade_alice, cascade_bob
from .channel import ChannelModel, DeadTimeState, DetectorModel, drift_advance, simulate_block
from .config import ProtocolConfig, config_to_json, require_valid
from .decoy import EstimatorUnavailable
from .estimation import ObservedCounts, estimate
from .feedback import ControllerState, calibration_mask, controller_step
from .hashing import privacy_amplify, verification_bits, verification_digest
from .records import CHECK, KEY, MISMATCH, NONE, X, Z, SiftedSets
from .rng import RandomStream
from .security import EpsilonBudget, SecurityBounds, secret_key_length, skr_from_length
from .transport import (
    MsgType,
    PeerAborted,
    TransportError,
    decode_indices,
    encode_indices,
    loopback_pair,
)

__all__ = [
    "PHASES",
    "SessionAborted",
    "SessionState",
    "KeyMaterial",
    "Physics",
    "SessionOptions",
    "SessionResult",
    "PartyResult",
    "QuantumLink",
    "run_party",
    "run_session",
    "sift_exchange",
    "verify_keys",
    "privacy_amplify",
    "report_json",
    "ReconciliationResult",
]

PHASES = ("collecting", "reconciling_bases", "estimating", "correcting", "verifying", "amplifying", "done")
_NEXT = {
    "collecting": {"reconciling_bases"},
    # steps 1-3 repeat block by block until the agreed set sizes are reached
    "reconciling_bases": {"collecting", "estimating"},
    "estimating": {"correcting"},
    "correcting": {"verifying"},
    "verifying": {"amplifying"},
    "amplifying": {"done"},
    "done": set(),
    "aborted": set(),
}

_U64 = struct.Struct("<Q")
_SIFT_MISMATCH, _SIFT_CONTINUE, _SIFT_STOP = 0, 1, 2


class SessionAborted(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass
class KeyMaterial:
    raw_key_a: Optional[np.ndarray] = None
    raw_key_b: Optional[np.ndarray] = None
    corrected_key: Optional[np.ndarray] = None
    final_key_a: Optional[np.ndarray] = None
    final_key_b: Optional[np.ndarray] = None
    leakage_bits: int = 0
    verify_bits_published: int = 0


@dataclass
class SessionState:
    role: str
    phase: str = "collecting"
    accumulators: SiftedSets = field(default_factory=SiftedSets)
    key: KeyMaterial = field(default_factory=KeyMaterial)
    transcript: list = field(default_factory=list)
    history: list = field(default_factory=lambda: ["collecting"])
    abort_reason: Optional[str] = None

    def advance(self, phase: str) -> None:
        if phase not in _NEXT[self.phase]:
            raise RuntimeError(f"illegal phase transition {self.phase} -> {phase}")
        self.phase = phase
        if self.history[-1] != phase:
            self.history.append(phase)

    def abort(self, reason: str) -> None:
        self.phase = "aborted"
        self.history.append("aborted")
        self.abort_reason = reason
        # no key material survives an abort
        self.key.final_key_a = None
        self.key.final_key_b = None


@dataclass(frozen=True)
class Physics:
    """Simulated quantum layer shared (by value) between the parties."""

    channel: ChannelModel = field(default_factory=ChannelModel)
    detector: DetectorModel = field(default_factory=DetectorModel)
    block_pulses: int = 1 << 20


@dataclass(frozen=True)
class SessionOptions:
    """Protocol choices both parties must agree on.

    ``min_z`` and ``min_x`` are the agreed set sizes (|Z| and every |X_mu|).
    Collection stops early once they are met if ``stop_when_met`` is set;
    otherwise all ``n_pulses`` are sent. ``feedback`` enables calibration
    pulses and drift compensation with the given controller settings.
    """

    min_z: int = 1
    min_x: int = 0
    stop_when_met: bool = False
    estimator: str = "loss-tolerant"
    feedback: Optional[ControllerState] = None
    cascade_min_passes: int = 4
    cascade_max_passes: int = 16
    auth_key: bytes = b"decoyqkd-demo-auth-key"
    timeout: Optional[float] = 120.0


class QuantumLink:
    """One party's replica of the simulated quantum channel."""

    def __init__(self, cfg: ProtocolConfig, physics: Physics, seed: int):
        self.cfg = cfg
        self.physics = physics
        self.stream = RandomStream(int(seed), "quantum")
        self.dead = DeadTimeState()
        self.channel = physics.channel
        self.next_block = 0

    def blocks(self):
        n, b = self.cfg.n_pulses, self.physics.block_pulses
        return [(s, min(b, n - s)) for s in range(0, n, b)]

    def run_block(self, i: int, start: int, n: int, compensation=0.0, calibration=None, probe=None):
        if i != self.next_block:
            raise RuntimeError("blocks must be simulated in order")
        self.next_block += 1
        rs = self.stream.child(f"block{i}")
        if self.channel.drift.random_walk_sigma > 0:
            dt = n / self.cfg.clock_rate
            self.channel = replace(self.channel, drift=drift_advance(self.channel.drift, dt, rs.child("drift")))
        rec, _ = simulate_block(
            n, self.cfg, self.channel, self.physics.detector, rs.child("pulses"),
            start_index=start, dead_state=self.dead, compensation=compensation,
            calibration=calibration, calibration_compensation=probe,
        )
        return rec


@dataclass
class PartyResult:
    role: str
    state: SessionState
    report: dict
    bounds: Optional[SecurityBounds] = None
    reconciliation: Optional[ReconciliationResult] = None


@dataclass
class SessionResult:
    key: KeyMaterial
    bounds: Optional[SecurityBounds]
    report: dict
    alice: PartyResult
    bob: PartyResult

    @property
    def done(self) -> bool:
        return self.report["phase"] == "done"


# -- helpers --------------------------------------------------------------------


def _packbits(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack("<I", bits.size) + np.packbits(bits).tobytes()


def _unpackbits(payload: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<I", payload)
    return np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=4), count=n)


def _membership_digest(block: int, kinds: np.ndarray, intensity: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16, person=b"decoyqkd-sift")
    h.update(_U64.pack(block))
    h.update(np.ascontiguousarray(kinds, dtype=np.uint8).tobytes())
    h.update(np.ascontiguousarray(intensity, dtype=np.uint8).tobytes())
    return h.digest()


def _kinds(a_basis, b_basis) -> np.ndarray:
    """Set kind of detected rounds from the two basis announcements."""
    k = np.zeros(a_basis.size, dtype=np.uint8)
    k[(a_basis == Z) & (b_basis == Z)] = KEY
    k[(a_basis == X) & (b_basis == X)] = CHECK
    k[(a_basis == Z) & (b_basis == X)] = MISMATCH
    return k


@dataclass
class _Public:
    """Public statistics accumulated identically by both parties."""

    sets: SiftedSets = field(default_factory=SiftedSets)
    key_pulses: int = 0
    pulses_used: int = 0
    calibration_pulses: int = 0

    def add_block(self, idx, kinds, intensity, x_bob, mism_alice, mism_bob):
        part = SiftedSets()
        for mu in range(3):
            at = intensity == mu
            part.z_sets[mu] = idx[at & (kinds == KEY)]
            part.x_sets[mu] = idx[at & (kinds == CHECK)]
            part.x_error_counts[mu] = np.count_nonzero(x_bob[at[kinds == CHECK]] == 1) if x_bob.size else 0
            mm_at = at[kinds == MISMATCH]
            for j in (0, 1):
                for k in (0, 1):
                    part.mismatch_counts[j, k, mu] = np.count_nonzero(mm_at & (mism_alice == j) & (mism_bob == k))
        # blocks are disjoint and increasing, so concatenation keeps order
        s = self.sets
        self.sets = SiftedSets(
            z_sets=[np.concatenate([a, b]) for a, b in zip(s.z_sets, part.z_sets)],
            x_sets=[np.concatenate([a, b]) for a, b in zip(s.x_sets, part.x_sets)],
            mismatch_counts=s.mismatch_counts + part.mismatch_counts,
            z_error_counts=s.z_error_counts,
            x_error_counts=s.x_error_counts + part.x_error_counts,
        )

    def targets_met(self, opts: SessionOptions) -> bool:
        return int(self.sets.z_sizes.sum()) >= opts.min_z and bool(np.all(self.sets.x_sizes >= opts.min_x))

    def observed(self, cfg) -> ObservedCounts:
        s = self.sets
        pz, pxb = cfg.p_z_alice, 1.0 - cfg.p_z_bob
        # yield denominators: expected pulses per state measured in X
        pulses = self.key_pulses * pxb * np.array([pz / 2, pz / 2, 1.0 - pz])
        x_err = s.x_error_counts.astype(float)
        return ObservedCounts(
            z_detected=s.z_sizes.astype(float),
            x_detected=s.x_sizes.astype(float),
            x_errors=x_err,
            mismatch=s.mismatch_counts.astype(float),
            pulses_bob_x=pulses,
            n_pulses=float(self.key_pulses),
        )


class _Party:
    def __init__(self, role, cfg, physics, ep, seed, opts):
        self.role = role
        self.cfg = require_valid(cfg)
        self.physics = physics
        self.ep = ep
        self.seed = int(seed)
        self.opts = opts
        self.state = SessionState(role)
        self.state.transcript = ep.transcript
        self.link = QuantumLink(cfg, physics, seed)
        self.rng = RandomStream(self.seed, role).generator()
        self.public = _Public()
        self.controller = opts.feedback
        # (centre, probe) angles in force for the next block, as announced by Alice
        self.angles = (opts.feedback.compensation_angle, opts.feedback.probe_angle) if opts.feedback else None
        self.my_key_bits = []  # per block: own bits at key-set rounds
        self.estimate = None
        self.bounds = None
        self.recon = None
        self.e_bit = None
        self.l = 0

    def recv(self, t):
        return self.ep.recv(t, timeout=self.opts.timeout).payload

    def send(self, t, payload=b""):
        self.ep.send(t, payload)

    # ---- collection ----------------------------------------------------

    def collect(self):
        for i, (start, n) in enumerate(self.link.blocks()):
            if i > 0:
                self.state.advance("collecting")
            fb = self.controller
            cal = calibration_mask(start, n, fb) if fb is not None else None
            comp, probe = self.angles if fb is not None else (0.0, None)
            rec = self.link.run_block(i, start, n, comp, cal, probe)
            self.public.pulses_used += n
            ncal = int(cal.sum()) if cal is not None else 0
            self.public.calibration_pulses += ncal
            self.public.key_pulses += n - ncal
            self.state.advance("reconciling_bases")
            status = self.sift_block(i, rec, cal)
            self.state.accumulators = self.public.sets
            if fb is not None:
                self.calibrate(rec, cal)
            if status == _SIFT_STOP:
                break
        if not self.public.targets_met(self.opts):
            self.abort_shared("insufficient-data", "set-size targets not met")

    def calibrate(self, rec, cal):
        if self.role == "bob":
            # calibration states are public: 0_z on even pulses, 0_x on odd
            cal_basis = np.where(rec.index % 2 == 1, X, Z)
            matched = cal & (rec.outcome != NONE) & (rec.bob_basis == cal_basis)
            clicks = int(matched.sum())
            errors = int(np.count_nonzero(rec.resolved[matched] != 0))
            self.send(MsgType.CALIBRATE, _U64.pack(clicks) + _U64.pack(errors))
            c, p = struct.unpack("<dd", self.recv(MsgType.CALIBRATE))
            self.controller = replace(self.controller, compensation_angle=c, probe=0, probe_errors=())
            self.angles = (c, p)
        else:
            clicks, errors = struct.unpack("<QQ", self.recv(MsgType.CALIBRATE))
            observed = errors / clicks if clicks else 0.5
            self.controller = controller_step(self.controller, observed, self.rng)
            self.angles = (self.controller.compensation_angle, self.controller.probe_angle)
            self.send(MsgType.CALIBRATE, struct.pack("<dd", *self.angles))

    # ---- estimation ------------------------------------------------------

    def run_estimation(self):
        self.state.advance("estimating")
        obs = self.public.observed(self.cfg)
        try:
            est = estimate(obs, self.cfg, e_bit=0.0, estimator=self.opts.estimator)
        except EstimatorUnavailable as exc:
            self.abort_shared("security", f"phase-error estimate unavailable: {exc}")
        self.estimate = est
        if est.e_phase_upper > self.cfg.e_phase_tol:
            self.abort_shared("security", f"e_phase {est.e_phase_upper:.4f} exceeds tolerance {self.cfg.e_phase_tol}")

    def key_order(self, seed):
        idx = self.public.sets.key_indices()
        order = RandomStream(int(seed), "rawkey").generator().permutation(idx.size)
        return idx, order

    def finish_bounds(self):
        est = self.estimate
        est.e_bit = self.e_bit
        self.bounds = est.bounds()
        budget = EpsilonBudget.from_config(self.cfg)
        self.l = secret_key_length(self.bounds, budget, self.cfg.xi, leakage_ec=self.state.key.leakage_bits)
        if self.l <= 0:
            self.abort_shared("no-key", "secret key length is zero")

    # ---- aborts ----------------------------------------------------------

    def abort_shared(self, reason, detail=""):
        """Abort decided identically by both parties from public data."""
        if self.role == "alice":
            self.send(MsgType.ABORT, reason.encode())
        else:
            try:
                got = self.ep.recv(MsgType.ABORT, timeout=self.opts.timeout).payload.decode()
            except PeerAborted as exc:
                got = exc.reason
            if got != reason:
                raise SessionAborted("link", f"abort reasons disagree: {got} vs {reason}")
        raise SessionAborted(reason, detail)

    # ---- report ----------------------------------------------------------

    def report(self) -> dict:
        cfg, st = self.cfg, self.state
        s = self.public.sets
        est = self.estimate
        duration = self.public.pulses_used / cfg.clock_rate if self.public.pulses_used else cfg.duration
        r = {
            "role": self.role,
            "seed": self.seed,
            "phase": st.phase,
            "abort_reason": st.abort_reason,
            "phase_history": list(st.history),
            "config": json.loads(config_to_json(cfg)),
            "channel": {
                "loss_db": self.physics.channel.total_loss_db,
                "misalignment_angle": self.physics.channel.misalignment_angle,
                "depolarization": self.physics.channel.depolarization,
                "drift_sigma": self.physics.channel.drift.random_walk_sigma,
            },
            "detector": {
                "efficiency": self.physics.detector.efficiency,
                "dark_rate": self.physics.detector.dark_rate,
                "dead_time": self.physics.detector.dead_time,
            },
            "pulses_used": self.public.pulses_used,
            "calibration_pulses": self.public.calibration_pulses,
            "duration_s": duration,
            "counts": {
                "z_sizes": s.z_sizes.tolist(),
                "x_sizes": s.x_sizes.tolist(),
                "x_errors": s.x_error_counts.tolist(),
                "mismatch": s.mismatch_counts.tolist(),
                "n_z": int(s.z_sizes.sum()),
            },
            "bounds": None,
            "estimates": None,
            "leakage_bits": st.key.leakage_bits,
            "verify_bits_published": st.key.verify_bits_published,
            "key_length": int(self.l) if st.phase == "done" else 0,
            "skr_bps": skr_from_length(self.l, duration) if st.phase == "done" else 0.0,
            "transcript": {
                "bytes_sent": self.ep.bytes_sent(),
                "bytes_received": self.ep.bytes_received(),
                "frames": len(self.ep.transcript),
                "by_type": self.ep.totals_by_type(),
            },
            "feedback": None,
        }
        if est is not None:
            r["estimates"] = {
                "m0_lower": est.m0_lower,
                "m1_lower": est.m1_lower,
                "e_phase_loss_tolerant": est.e_phase_loss_tolerant,
                "e_phase_standard": est.e_phase_standard,
                "e_phase_upper": est.e_phase_upper,
                "estimator": est.estimator,
            }
        if self.bounds is not None:
            b = self.bounds
            r["bounds"] = {
                "m0_lower": b.m0_lower,
                "m1_lower": b.m1_lower,
                "e_phase_upper": b.e_phase_upper,
                "e_bit": b.e_bit,
                "n_z_sifted": b.n_z_sifted,
            }
        if self.recon is not None:
            r["reconciliation"] = {"passes": self.recon.passes, "rounds": self.recon.rounds}
        if self.controller is not None:
            r["feedback"] = {
                "compensation_angle": self.controller.compensation_angle,
                "overhead": self.controller.overhead,
            }
        return r


class _Alice(_Party):
    def sift_block(self, i, rec, cal):
        local = decode_indices(self.recv(MsgType.DETECT_INDICES))
        if local.size and local[-1] >= len(rec):
            raise SessionAborted("link", "detection index out of range")
        b_basis = _unpackbits(self.recv(MsgType.BASIS_ANNOUNCE))
        if b_basis.size != local.size:
            raise SessionAborted("link", "basis announcement length mismatch")
        if cal is not None and np.any(cal[local]):
            raise SessionAborted("link", "calibration pulse announced as detection")
        idx = rec.index[local]
        a_basis = rec.alice_basis[local]
        inten = rec.intensity[local]
        self.send(MsgType.BASIS_ANNOUNCE, _packbits(a_basis))
        self.send(MsgType.INTENSITY_ANNOUNCE, inten.astype(np.uint8).tobytes())
        kinds = _kinds(a_basis, b_basis)
        mism_alice = rec.alice_bit[local][kinds == MISMATCH]
        self.send(MsgType.PE_SUMMARY, _packbits(mism_alice))
        xb = _unpackbits(self.recv(MsgType.PE_SUMMARY))
        n_check = int(np.count_nonzero(kinds == CHECK))
        if xb.size != n_check + mism_alice.size:
            raise SessionAborted("link", "outcome announcement length mismatch")
        x_bob, mism_bob = xb[:n_check], xb[n_check:]
        self.public.add_block(idx, kinds, inten, x_bob, mism_alice, mism_bob)
        self.my_key_bits.append(rec.alice_bit[local][kinds == KEY])
        digest = self.recv(MsgType.SIFT_CONFIRM)
        if digest != _membership_digest(i, kinds, inten):
            self.send(MsgType.SIFT_CONFIRM, bytes([_SIFT_MISMATCH]))
            raise SessionAborted("link", "sift membership digests differ")
        stop = self.opts.stop_when_met and self.public.targets_met(self.opts)
        status = _SIFT_STOP if stop else _SIFT_CONTINUE
        self.send(MsgType.SIFT_CONFIRM, bytes([status]))
        return status

    def run(self):
        self.collect()
        self.run_estimation()
        seed = int(self.rng.integers(0, 1 << 63))
        self.send(MsgType.PE_SUMMARY, _U64.pack(seed))
        idx, order = self.key_order(seed)
        raw = np.concatenate(self.my_key_bits) if self.my_key_bits else np.zeros(0, np.uint8)
        raw = raw[order]
        self.state.key.raw_key_a = raw

        self.state.advance("correcting")
        self.state.key.leakage_bits = cascade_alice(raw, self.ep, timeout=self.opts.timeout)
        (n_err,) = _U64.unpack(self.recv(MsgType.PE_SUMMARY))
        self.e_bit = n_err / raw.size if raw.size else 0.0

        self.state.advance("verifying")
        vseed = int(self.rng.integers(0, 1 << 63))
        self.send(MsgType.VERIFY_SEED, _U64.pack(vseed))
        digest = verification_digest(raw, self.cfg.eps_cor, vseed)
        self.send(MsgType.VERIFY_DIGEST, _packbits(digest))
        self.state.key.verify_bits_published = digest.size
        ok = self.recv(MsgType.VERIFY_DIGEST)
        if ok != b"\x01":
            raise SessionAborted("correctness", "verification hashes differ")

        self.state.advance("amplifying")
        self.finish_bounds()
        pseed = int(self.rng.integers(0, 1 << 63))
        self.send(MsgType.PA_SEED, _U64.pack(pseed))
        self.state.key.final_key_a = privacy_amplify(raw, self.l, pseed)
        self.state.advance("done")


class _Bob(_Party):
    def sift_block(self, i, rec, cal):
        detected = rec.outcome != NONE
        if cal is not None:
            detected &= ~cal
        local = np.flatnonzero(detected)
        idx = rec.index[local]
        self.send(MsgType.DETECT_INDICES, encode_indices(local))
        b_basis = rec.bob_basis[local]
        self.send(MsgType.BASIS_ANNOUNCE, _packbits(b_basis))
        a_basis = _unpackbits(self.recv(MsgType.BASIS_ANNOUNCE))
        inten = np.frombuffer(self.recv(MsgType.INTENSITY_ANNOUNCE), dtype=np.uint8)
        if a_basis.size != local.size or inten.size != local.size or np.any(inten > 2):
            raise SessionAborted("link", "announcement length mismatch")
        kinds = _kinds(a_basis, b_basis)
        mism_alice = _unpackbits(self.recv(MsgType.PE_SUMMARY))
        res = rec.resolved[local]
        x_bob = res[kinds == CHECK].astype(np.uint8)
        mism_bob = res[kinds == MISMATCH].astype(np.uint8)
        if mism_alice.size != mism_bob.size:
            raise SessionAborted("link", "mismatch announcement length")
        self.send(MsgType.PE_SUMMARY, _packbits(np.concatenate([x_bob, mism_bob])))
        self.public.add_block(idx, kinds, inten, x_bob, mism_alice, mism_bob)
        self.my_key_bits.append(res[kinds == KEY].astype(np.uint8))
        self.send(MsgType.SIFT_CONFIRM, _membership_digest(i, kinds, inten))
        status = self.recv(MsgType.SIFT_CONFIRM)[0]
        if status == _SIFT_MISMATCH:
            raise SessionAborted("link", "sift membership digests differ")
        return status

    def run(self):
        self.collect()
        self.run_estimation()
        (seed,) = _U64.unpack(self.recv(MsgType.PE_SUMMARY))
        idx, order = self.key_order(seed)
        raw = np.concatenate(self.my_key_bits) if self.my_key_bits else np.zeros(0, np.uint8)
        raw = raw[order]
        self.state.key.raw_key_b = raw

        self.state.advance("correcting")
        s = self.public.sets
        x_tot = s.x_sizes.sum()
        e_est = float(s.x_error_counts.sum() / x_tot) if x_tot else 0.05
        try:
            self.recon = cascade_bob(
                raw, e_est, self.ep, seed=int(self.rng.integers(0, 1 << 63)),
                min_passes=self.opts.cascade_min_passes, max_passes=self.opts.cascade_max_passes,
                timeout=self.opts.timeout,
            )
        except ReconciliationFailed as exc:
            self.send(MsgType.ABORT, b"efficiency")
            raise SessionAborted("efficiency", str(exc)) from None
        corrected = self.recon.corrected_key
        self.state.key.corrected_key = corrected
        self.state.key.leakage_bits = self.recon.leakage_bits
        n_err = int(np.count_nonzero(corrected != raw))
        self.send(MsgType.PE_SUMMARY, _U64.pack(n_err))
        self.e_bit = n_err / raw.size if raw.size else 0.0

        self.state.advance("verifying")
        (vseed,) = _U64.unpack(self.recv(MsgType.VERIFY_SEED))
        theirs = _unpackbits(self.recv(MsgType.VERIFY_DIGEST))
        self.state.key.verify_bits_published = theirs.size
        mine = verification_digest(corrected, self.cfg.eps_cor, vseed)
        ok = theirs.size == verification_bits(self.cfg.eps_cor) and np.array_equal(mine, theirs)
        self.send(MsgType.VERIFY_DIGEST, b"\x01" if ok else b"\x00")
        if not ok:
            raise SessionAborted("correctness", "verification hashes differ")

        self.state.advance("amplifying")
        self.finish_bounds()
        (pseed,) = _U64.unpack(self.recv(MsgType.PA_SEED))
        self.state.key.final_key_b = privacy_amplify(corrected, self.l, pseed)
        self.state.advance("done")


def run_party(role: str, cfg: ProtocolConfig, physics: Physics, endpoint, seed: int, options: SessionOptions = SessionOptions()) -> PartyResult:
    """Run one side of a session to completion or abort; never raises on abort."""
    cls = {"alice": _Alice, "bob": _Bob}[role]
    p = cls(role, cfg, physics, endpoint, seed, options)
    try:
        p.run()
    except SessionAborted as exc:
        p.state.abort(exc.reason)
    except PeerAborted as exc:
        p.state.abort(exc.reason)
    except (TransportError, TimeoutError, struct.error, ValueError) as exc:
        p.state.abort("link")
        try:
            endpoint.send(MsgType.ABORT, b"link")
        except Exception:
            pass
        p.link_error = repr(exc)
    return PartyResult(role, p.state, p.report(), p.bounds, p.recon)


def run_session(
    cfg: ProtocolConfig,
    physics: Physics = Physics(),
    link=None,
    seed: int = 0,
    options: SessionOptions = SessionOptions(),
) -> SessionResult:
    """Run Alice on the calling thread and Bob on a helper thread.

    ``link`` is an (alice_endpoint, bob_endpoint) pair; a loopback pair keyed
    with ``options.auth_key`` is created when omitted. The returned report is
    Alice's.
    """
    cfg = require_valid(cfg)
    a_ep, b_ep = link if link is not None else loopback_pair(options.auth_key)
    box = {}

    def bob():
        box["bob"] = run_party("bob", cfg, physics, b_ep, seed, options)

    t = threading.Thread(target=bob, daemon=True)
    t.start()
    alice = run_party("alice", cfg, physics, a_ep, seed, options)
    t.join()
    bob_r = box["bob"]
    ka, kb = alice.state.key, bob_r.state.key
    key = KeyMaterial(
        raw_key_a=ka.raw_key_a,
        raw_key_b=kb.raw_key_b,
        corrected_key=kb.corrected_key,
        final_key_a=ka.final_key_a,
        final_key_b=kb.final_key_b,
        leakage_bits=max(ka.leakage_bits, kb.leakage_bits),
        verify_bits_published=ka.verify_bits_published,
    )
    return SessionResult(key, alice.bounds, alice.report, alice, bob_r)


def report_json(report: dict) -> str:
    """Canonical JSON text of a session report (byte-stable for equal reports)."""
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# -- stand-alone pieces of the exchange ------------------------------------------


def sift_exchange(records, link=None, cfg: Optional[ProtocolConfig] = None):
    """Run the sifting announcements for a fixed record block.

    Returns ``(alice_sets, bob_sets)``; the two agree whenever the exchange
    completes. Each side sees only its own columns of ``records``. Raises
    :class:`SessionAborted` with reason "link" on any transport failure.
    """
    cfg = cfg or ProtocolConfig(n_pulses=max(len(records), 1))
    a_ep, b_ep = link if link is not None else loopback_pair(b"sift")
    opts = SessionOptions()
    out = {}

    def side(cls, ep, name):
        p = cls(name, cfg, Physics(), ep, 0, opts)
        try:
            p.sift_block(0, records, None)
            out[name] = p.public.sets
        except (TransportError, SessionAborted, TimeoutError) as exc:
            out[name] = exc
            try:
                ep.send(MsgType.ABORT, b"link")
            except Exception:
                pass

    t = threading.Thread(target=side, args=(_Bob, b_ep, "bob"), daemon=True)
    t.start()
    side(_Alice, a_ep, "alice")
    t.join()
    for name in ("alice", "bob"):
        if isinstance(out[name], Exception):
            raise SessionAborted("link", str(out[name]))
    return out["alice"], out["bob"]


def verify_keys(key_a, key_b, eps_cor: float, link=None, seed: int = 0):
    """Hash comparison over a link: returns (passed, published_bits)."""
    a_ep, b_ep = link if link is not None else loopback_pair(b"verify")

    def bob():
        (s,) = _U64.unpack(b_ep.recv(MsgType.VERIFY_SEED).payload)
        theirs = _unpackbits(b_ep.recv(MsgType.VERIFY_DIGEST).payload)
        ok = np.array_equal(theirs, verification_digest(key_b, eps_cor, s))
        b_ep.send(MsgType.VERIFY_DIGEST, b"\x01" if ok else b"\x00")

    t = threading.Thread(target=bob, daemon=True)
    t.start()
    a_ep.send(MsgType.VERIFY_SEED, _U64.pack(int(seed)))
    digest = verification_digest(key_a, eps_cor, seed)
    a_ep.send(MsgType.VERIFY_DIGEST, _packbits(digest))
    ok = a_ep.recv(MsgType.VERIFY_DIGEST).payload == b"\x01"
    t.join()
    return ok, int(digest.size)
