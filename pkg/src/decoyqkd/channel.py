"""Simulated physical layer: Poissonian source, lossy rotating fibre, threshold detectors.

Polarisation rotations are given as the physical rotation angle of the
polarisation plane. A rotation by ``theta`` turns the Bloch vector by
``2*theta`` about the y axis, so a Z-basis state is flipped with probability
``sin(theta)**2``.

Bob picks one basis per pulse and reads two detectors in that basis. Photons
pass loss, depolarisation and projection independently, then are detected
with the detector efficiency. Each detector also fires on a dark count with
probability ``dark_rate / clock_rate`` per gate. Dead time is
non-paralyzable: after a registered click a detector ignores the next
``round(dead_time * clock_rate)`` pulses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .records import DOUBLE, NONE, X, Z, Records
from .rng import RandomStream

__all__ = [
    "DriftModel",
    "ChannelModel",
    "DetectorModel",
    "DeadTimeState",
    "RateTable",
    "TaggedCounts",
    "STATE_BASIS",
    "STATE_BIT",
    "drift_advance",
    "saturation_throughput",
    "projection_prob",
    "analytic_rates",
    "simulate_block",
    "sample_tagged_counts",
    "wrap_angle",
]

# prepared states 0_z, 1_z, 0_x: their basis, bit, and Bloch polar angle in the X-Z plane
STATE_BASIS = np.array([Z, Z, X], dtype=np.uint8)
STATE_BIT = np.array([0, 1, 0], dtype=np.uint8)
_STATE_POLAR = np.array([0.0, math.pi, math.pi / 2])


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RandomStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RandomStream or numpy Generator, got {type(rng).__name__}")


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    if -math.pi < a <= math.pi:
        return a
    r = math.fmod(a + math.pi, 2 * math.pi)
    if r <= 0:
        r += 2 * math.pi
    return r - math.pi


@dataclass(frozen=True)
class DriftModel:
    """Random-walk drift of the channel rotation angle."""

    random_walk_sigma: float = 0.0  # rad / sqrt(s)
    timestep: float = 1.0
    current_angle: float = 0.0

    def __post_init__(self):
        if self.random_walk_sigma < 0:
            raise ValueError("random_walk_sigma must be non-negative")
        object.__setattr__(self, "current_angle", wrap_angle(self.current_angle))


def drift_advance(d: DriftModel, dt: float, rng) -> DriftModel:
    """One Gaussian random-walk step of standard deviation sigma*sqrt(dt)."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if d.random_walk_sigma == 0 or dt == 0:
        return d
    step = _generator(rng).normal(0.0, d.random_walk_sigma * math.sqrt(dt))
    return replace(d, current_angle=wrap_angle(d.current_angle + step))


@dataclass(frozen=True)
class ChannelModel:
    """Fibre link between Alice and Bob.

    ``misalignment_angle`` is a static polarisation rotation; the drift angle
    adds to it. ``depolarization`` is the probability that a photon's
    polarisation is fully randomised.
    """

    loss_db: float = 0.0
    misalignment_angle: float = 0.0
    drift: DriftModel = field(default_factory=DriftModel)
    extra_attenuation_db: float = 0.0
    depolarization: float = 0.0

    def __post_init__(self):
        if self.loss_db + self.extra_attenuation_db < 0:
            raise ValueError("total attenuation must be non-negative")
        if not 0 <= self.depolarization <= 1:
            raise ValueError("depolarization must lie in [0, 1]")

    @property
    def total_loss_db(self) -> float:
        return self.loss_db + self.extra_attenuation_db

    @property
    def transmittance(self) -> float:
        return 10.0 ** (-self.total_loss_db / 10.0)

    def rotation(self, compensation: float = 0.0) -> float:
        return self.misalignment_angle + self.drift.current_angle - compensation


@dataclass(frozen=True)
class DetectorModel:
    """Threshold single-photon detector (the same model for all four of Bob's detectors)."""

    efficiency: float = 1.0
    dark_rate: float = 0.0  # counts / s
    dead_time: Optional[float] = None  # s; defaults to 1/max_count_rate
    jitter_sigma: float = 0.0  # s; stored only
    max_count_rate: Optional[float] = None  # counts / s

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be non-negative")
        if self.dead_time is None:
            dt = 1.0 / self.max_count_rate if self.max_count_rate else 0.0
            object.__setattr__(self, "dead_time", dt)
        if self.dead_time < 0:
            raise ValueError("dead_time must be non-negative")

    def dark_prob(self, clock_rate: float) -> float:
        return min(1.0, self.dark_rate / clock_rate)

    def dead_pulses(self, clock_rate: float) -> int:
        return int(round(self.dead_time * clock_rate))


def saturation_throughput(det: DetectorModel, incident_rate: float) -> float:
    """Registered count rate of a non-paralyzable detector."""
    if incident_rate < 0:
        raise ValueError("incident_rate must be non-negative")
    if math.isinf(incident_rate):
        return 1.0 / det.dead_time if det.dead_time > 0 else math.inf
    return incident_rate / (1.0 + incident_rate * det.dead_time)


def projection_prob(state: int, bob_basis: int, rotation: float, depolarization: float = 0.0) -> float:
    """Probability that one photon of prepared state ``state`` lands on Bob's bit-0 detector."""
    polar = _STATE_POLAR[state] + 2.0 * rotation
    if bob_basis == Z:
        p0 = 0.5 * (1.0 + math.cos(polar))
    else:
        p0 = 0.5 * (1.0 + math.sin(polar))
    return (1.0 - depolarization) * p0 + 0.5 * depolarization


def _projection_table(rotation, depolarization):
    out = np.empty((3, 2))
    for j in range(3):
        for b in (Z, X):
            out[j, b] = projection_prob(j, b, rotation, depolarization)
    return out


def _state_probs(cfg):
    pz = cfg.p_z_alice
    return np.array([pz / 2, pz / 2, 1.0 - pz])


@dataclass
class RateTable:
    """Closed-form per-pulse outcome probabilities.

    ``outcome[mu, j, b, y]`` is the probability of Bob outcome y (0, 1,
    ``NONE``, ``DOUBLE``) given intensity index mu, prepared state j (0_z, 1_z,
    0_x) and Bob basis b. ``error[mu, j, b]`` is the probability of a bit error
    after double clicks are resolved at random (NaN for mismatched bases).
    ``weight[mu, j, b]`` is the probability of that row being chosen.
    """

    outcome: np.ndarray
    error: np.ndarray
    weight: np.ndarray
    liveness: np.ndarray  # [bob basis, detector] fraction of pulses a detector is live

    def detection(self) -> np.ndarray:
        return 1.0 - self.outcome[..., NONE]

    def resolved(self) -> np.ndarray:
        """Probability of Bob's resolved bit 0 / 1 per row, shape (3, 3, 2, 2)."""
        half = 0.5 * self.outcome[..., DOUBLE]
        return np.stack([self.outcome[..., 0] + half, self.outcome[..., 1] + half], axis=-1)

    def gain(self, mu: int) -> float:
        """Detection probability of intensity ``mu`` averaged over states and Bob bases."""
        w = self.weight[mu]
        return float(np.sum(w * self.detection()[mu]) / np.sum(w))


def _click_probs(cfg, ch, det, compensation):
    mus = np.asarray(cfg.intensities)
    proj = _projection_table(ch.rotation(compensation), ch.depolarization)
    eta = ch.transmittance * det.efficiency
    pd = det.dark_prob(cfg.clock_rate)
    mean = mus[:, None, None] * eta  # [mu, 1, 1]
    light0 = mean * proj[None]  # [mu, j, b]
    light1 = mean * (1.0 - proj[None])
    q0 = 1.0 - (1.0 - pd) * np.exp(-light0)
    q1 = 1.0 - (1.0 - pd) * np.exp(-light1)
    return q0, q1


def analytic_rates(cfg, ch: ChannelModel, det: DetectorModel, compensation: float = 0.0) -> RateTable:
    """Expected outcome probabilities for every (intensity, state, Bob basis) row.

    With dead time, a detector whose mean per-pulse click probability is p is
    live a fraction 1/(1 + D p) of the time, where D is the dead time in
    pulses.
    """
    q0, q1 = _click_probs(cfg, ch, det, compensation)
    weight = (
        np.asarray(cfg.intensity_probs)[:, None, None]
        * _state_probs(cfg)[None, :, None]
        * np.asarray(cfg.bob_basis_probs)[None, None, :]
    )
    dead = det.dead_pulses(cfg.clock_rate)
    live = np.ones((2, 2))
    if dead > 0:
        for b in (Z, X):
            for k, q in enumerate((q0, q1)):
                pbar = float(np.sum(weight[:, :, b] * q[:, :, b]))
                live[b, k] = 1.0 / (1.0 + dead * pbar)
    c0 = q0 * live[None, None, :, 0]
    c1 = q1 * live[None, None, :, 1]
    outcome = np.empty(q0.shape + (4,))
    outcome[..., 0] = c0 * (1.0 - c1)
    outcome[..., 1] = c1 * (1.0 - c0)
    outcome[..., DOUBLE] = c0 * c1
    outcome[..., NONE] = (1.0 - c0) * (1.0 - c1)
    error = np.full(q0.shape, np.nan)
    half = 0.5 * outcome[..., DOUBLE]
    error[:, 0, Z] = outcome[:, 0, Z, 1] + half[:, 0, Z]
    error[:, 1, Z] = outcome[:, 1, Z, 0] + half[:, 1, Z]
    error[:, 2, X] = outcome[:, 2, X, 1] + half[:, 2, X]
    return RateTable(outcome=outcome, error=error, weight=weight, liveness=live)


@dataclass
class DeadTimeState:
    """Index of the last registered click of each detector, carried between blocks."""

    last_click: np.ndarray = field(default_factory=lambda: np.full((2, 2), -(1 << 62), dtype=np.int64))


def _dead_time_filter(indices: np.ndarray, dead: int, last: int):
    keep = np.zeros(len(indices), dtype=bool)
    for n, i in enumerate(indices.tolist()):
        if i - last > dead:
            keep[n] = True
            last = i
    return keep, last


def simulate_block(
    n: int,
    cfg,
    ch: ChannelModel,
    det: DetectorModel,
    rng,
    *,
    start_index: int = 0,
    dead_state: Optional[DeadTimeState] = None,
    compensation: float = 0.0,
    calibration: Optional[np.ndarray] = None,
    calibration_compensation: Optional[float] = None,
):
    """Pulse-level Monte Carlo of ``n`` clock cycles.

    Returns ``(records, photons)``. ``photons`` is the emitted photon number
    of every pulse; it is hidden from the protocol and used only by oracle
    tests.

    Pulses flagged in the boolean array ``calibration`` carry fixed public
    states instead of random ones: signal intensity, 0_z on even and 0_x on
    odd indices, sent with ``calibration_compensation``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    g = _generator(rng)
    mus = np.asarray(cfg.intensities)
    intensity = g.choice(3, size=n, p=np.asarray(cfg.intensity_probs)).astype(np.uint8)
    alice_basis = (g.random(n) >= cfg.p_z_alice).astype(np.uint8)
    z_bits = g.integers(0, 2, size=n, dtype=np.uint8)
    alice_bit = np.where(alice_basis == Z, z_bits, 0).astype(np.uint8)
    bob_basis = (g.random(n) >= cfg.p_z_bob).astype(np.uint8)
    if calibration is not None:
        cal = np.asarray(calibration, dtype=bool)
        odd = (np.arange(start_index, start_index + n) % 2).astype(np.uint8)
        intensity[cal] = 0
        alice_basis[cal] = np.where(odd[cal] == 1, X, Z)
        alice_bit[cal] = 0
    photons = g.poisson(mus[intensity])
    arrived = g.binomial(photons, ch.transmittance)

    state = np.where(alice_basis == X, 2, alice_bit)
    proj = _projection_table(ch.rotation(compensation), ch.depolarization)
    p0 = proj[state, bob_basis]
    if calibration is not None and calibration_compensation is not None:
        proj_cal = _projection_table(ch.rotation(calibration_compensation), ch.depolarization)
        p0 = np.where(cal, proj_cal[state, bob_basis], p0)
    to0 = g.binomial(arrived, p0)
    to1 = arrived - to0
    hit0 = g.binomial(to0, det.efficiency) > 0
    hit1 = g.binomial(to1, det.efficiency) > 0
    pd = det.dark_prob(cfg.clock_rate)
    click0 = hit0 | (g.random(n) < pd)
    click1 = hit1 | (g.random(n) < pd)

    dead = det.dead_pulses(cfg.clock_rate)
    if dead > 0:
        if dead_state is None:
            dead_state = DeadTimeState()
        index = np.arange(start_index, start_index + n, dtype=np.int64)
        for b in (Z, X):
            for k, click in enumerate((click0, click1)):
                cand = np.flatnonzero(click & (bob_basis == b))
                keep, last = _dead_time_filter(index[cand], dead, int(dead_state.last_click[b, k]))
                dead_state.last_click[b, k] = last
                click[cand[~keep]] = False

    outcome = np.full(n, NONE, dtype=np.uint8)
    outcome[click0 & ~click1] = 0
    outcome[click1 & ~click0] = 1
    both = click0 & click1
    outcome[both] = DOUBLE
    resolved = np.full(n, -1, dtype=np.int8)
    resolved[outcome == 0] = 0
    resolved[outcome == 1] = 1
    resolved[both] = g.integers(0, 2, size=int(both.sum()), dtype=np.int8)

    records = Records(
        index=np.arange(start_index, start_index + n, dtype=np.int64),
        alice_basis=alice_basis,
        alice_bit=alice_bit,
        intensity=intensity,
        bob_basis=bob_basis,
        outcome=outcome,
        resolved=resolved,
    )
    return records, photons


@dataclass
class TaggedCounts:
    """Multinomial record counts with the photon number revealed.

    ``counts[mu, j, b, n, y]``: pulses of intensity mu, state j, Bob basis b,
    photon number n (last class lumps the tail) and resolved Bob bit y (0, 1,
    or 2 for no detection). ``doubles`` has the same layout without the y axis.
    """

    counts: np.ndarray
    doubles: np.ndarray
    n_pulses: int


def _outcome_given_photons(n_max, mus_eta, proj, pd):
    # probability of (click0, click1) given n photons for each state/basis
    nvec = np.arange(n_max + 1)[:, None, None]
    a0 = mus_eta * proj[None]
    a1 = mus_eta * (1.0 - proj[None])
    p00 = (1.0 - a0 - a1) ** nvec
    p10 = (1.0 - a1) ** nvec - p00
    p01 = (1.0 - a0) ** nvec - p00
    c00 = p00 * (1 - pd) ** 2
    c10 = (p10 + p00 * pd) * (1 - pd)
    c01 = (p01 + p00 * pd) * (1 - pd)
    c11 = np.clip(1.0 - c00 - c10 - c01, 0.0, 1.0)
    return c00, c10, c01, c11


def sample_tagged_counts(n: int, cfg, ch: ChannelModel, det: DetectorModel, rng, compensation: float = 0.0) -> TaggedCounts:
    """Draw the cell counts of ``n`` pulses in one multinomial step.

    Pulses are i.i.d., so this has the same distribution as aggregating
    ``simulate_block`` output by cell. Dead time couples pulses and is not
    supported here.
    """
    if det.dead_pulses(cfg.clock_rate) > 0:
        raise ValueError("tagged count sampling does not model dead time")
    g = _generator(rng)
    mus = np.asarray(cfg.intensities)
    mu_max = float(mus.max())
    n_max = int(math.ceil(mu_max + 12.0 * math.sqrt(mu_max) + 12))
    proj = _projection_table(ch.rotation(compensation), ch.depolarization)
    eta = ch.transmittance * det.efficiency
    c00, c10, c01, c11 = _outcome_given_photons(n_max, eta, proj, det.dark_prob(cfg.clock_rate))
    # [n, j, b, click-pattern]
    given_n = np.stack([c10, c01, c00, c11], axis=-1)

    photon = np.empty((3, n_max + 1))
    k = np.arange(n_max + 1)
    lgam = np.array([math.lgamma(i + 1) for i in k])
    for m, mu in enumerate(mus):
        if mu == 0:
            photon[m] = (k == 0).astype(float)
        else:
            photon[m] = np.exp(-mu + k * math.log(mu) - lgam)
        photon[m, -1] += max(0.0, 1.0 - photon[m].sum())
    weight = (
        np.asarray(cfg.intensity_probs)[:, None, None]
        * _state_probs(cfg)[None, :, None]
        * np.asarray(cfg.bob_basis_probs)[None, None, :]
    )
    # cell probabilities [mu, j, b, n, pattern]
    p = weight[:, :, :, None, None] * photon[:, None, None, :, None] * np.transpose(given_n, (1, 2, 0, 3))[None]
    flat = np.clip(p.ravel(), 0.0, None)
    flat = flat / flat.sum()
    drawn = g.multinomial(n, flat).reshape(p.shape)
    doubles = drawn[..., 3]
    to_zero = g.binomial(doubles, 0.5)
    counts = np.empty(p.shape[:-1] + (3,), dtype=np.int64)
    counts[..., 0] = drawn[..., 0] + to_zero
    counts[..., 1] = drawn[..., 1] + (doubles - to_zero)
    counts[..., 2] = drawn[..., 2]
    return TaggedCounts(counts=counts, doubles=doubles, n_pulses=n)
