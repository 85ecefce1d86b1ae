"""From sifted counts to ``SecurityBounds``: the parameter-estimation step.

The same chain serves observed counts (protocol sessions, Monte Carlo) and
expected counts (closed-form rates at full scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decoy import (
    EstimatorUnavailable,
    IntensityCounts,
    bound_single_events,
    bound_vacuum_events,
    estimate_phase_error_loss_tolerant,
    estimate_phase_error_standard,
    single_photon_yield_table,
)
from .records import CHECK, KEY, MISMATCH, X, Z, Records, classify_arrays
from .security import EpsilonBudget, SecurityBounds, binary_entropy

__all__ = [
    "ObservedCounts",
    "Estimate",
    "counts_from_records",
    "counts_from_rates",
    "counts_from_tagged",
    "estimate",
    "asymptotic_key_rate_length",
]


@dataclass
class ObservedCounts:
    """Everything parameter estimation needs, per intensity (μ1, μ2, μ3).

    ``mismatch[j, k, mu]`` counts a=Z, b=X detections with Alice bit j and
    Bob bit k; ``pulses_bob_x[j]`` is the number of pulses prepared in state
    j (0_z, 1_z, 0_x) that Bob measured in X. ``z_errors`` may be unknown
    (None) until error correction has run.
    """

    z_detected: np.ndarray
    x_detected: np.ndarray
    x_errors: np.ndarray
    mismatch: np.ndarray
    pulses_bob_x: np.ndarray
    n_pulses: float
    z_errors: Optional[np.ndarray] = None

    @property
    def n_z(self) -> float:
        return float(np.sum(self.z_detected))

    def e_bit(self) -> float:
        if self.z_errors is None:
            raise ValueError("Z-basis errors are not known yet")
        return float(np.sum(self.z_errors) / self.n_z) if self.n_z else 0.0

    def yield_counts(self) -> dict:
        return {
            ("0x", "0z"): self.mismatch[0, 0],
            ("0x", "1z"): self.mismatch[1, 0],
            ("0x", "0x"): self.x_detected - self.x_errors,
            ("1x", "0z"): self.mismatch[0, 1],
            ("1x", "1z"): self.mismatch[1, 1],
            ("1x", "0x"): self.x_errors,
        }

    def scaled(self, factor: float) -> "ObservedCounts":
        """Counts extrapolated to ``factor`` times as many pulses."""
        return ObservedCounts(
            z_detected=self.z_detected * factor,
            x_detected=self.x_detected * factor,
            x_errors=self.x_errors * factor,
            mismatch=self.mismatch * factor,
            pulses_bob_x=self.pulses_bob_x * factor,
            n_pulses=self.n_pulses * factor,
            z_errors=None if self.z_errors is None else self.z_errors * factor,
        )


def counts_from_records(rec: Records, with_z_errors: bool = True) -> ObservedCounts:
    kinds = classify_arrays(rec)
    z_det = np.zeros(3)
    z_err = np.zeros(3)
    x_det = np.zeros(3)
    x_err = np.zeros(3)
    mism = np.zeros((2, 2, 3))
    for mu in range(3):
        at = rec.intensity == mu
        zm = at & (kinds == KEY)
        xm = at & (kinds == CHECK)
        z_det[mu] = np.count_nonzero(zm)
        z_err[mu] = np.count_nonzero(rec.resolved[zm] != rec.alice_bit[zm])
        x_det[mu] = np.count_nonzero(xm)
        x_err[mu] = np.count_nonzero(rec.resolved[xm] == 1)
        mm = at & (kinds == MISMATCH)
        for j in (0, 1):
            for k in (0, 1):
                mism[j, k, mu] = np.count_nonzero(mm & (rec.alice_bit == j) & (rec.resolved == k))
    bx = rec.bob_basis == X
    za = rec.alice_basis == Z
    pulses = np.array(
        [
            np.count_nonzero(bx & za & (rec.alice_bit == 0)),
            np.count_nonzero(bx & za & (rec.alice_bit == 1)),
            np.count_nonzero(bx & ~za),
        ],
        dtype=float,
    )
    return ObservedCounts(z_det, x_det, x_err, mism, pulses, float(len(rec)), z_err if with_z_errors else None)


def counts_from_rates(table, n_pulses: float) -> ObservedCounts:
    """Expected counts of ``n_pulses`` pulses under a ``RateTable``."""
    w = table.weight * n_pulses
    det = table.detection()
    res = table.resolved()
    z_det = np.sum(w[:, 0:2, Z] * det[:, 0:2, Z], axis=1)
    z_err = w[:, 0, Z] * table.error[:, 0, Z] + w[:, 1, Z] * table.error[:, 1, Z]
    x_det = w[:, 2, X] * det[:, 2, X]
    x_err = w[:, 2, X] * table.error[:, 2, X]
    mism = np.empty((2, 2, 3))
    for j in (0, 1):
        for k in (0, 1):
            mism[j, k] = w[:, j, X] * res[:, j, X, k]
    pulses = np.sum(w[:, :, X], axis=0)
    return ObservedCounts(z_det, x_det, x_err, mism, pulses, float(n_pulses), z_err)


def counts_from_tagged(tc) -> ObservedCounts:
    c = tc.counts.sum(axis=3)  # [mu, j, b, y]
    z_det = c[:, 0, Z, 0:2].sum(axis=1) + c[:, 1, Z, 0:2].sum(axis=1)
    z_err = c[:, 0, Z, 1] + c[:, 1, Z, 0]
    x_det = c[:, 2, X, 0:2].sum(axis=1)
    x_err = c[:, 2, X, 1]
    mism = np.empty((2, 2, 3))
    for j in (0, 1):
        for k in (0, 1):
            mism[j, k] = c[:, j, X, k]
    pulses = c[:, :, X, :].sum(axis=(0, 2)).astype(float)
    return ObservedCounts(
        z_det.astype(float), x_det.astype(float), x_err.astype(float), mism.astype(float),
        pulses, float(tc.n_pulses), z_err.astype(float),
    )


@dataclass
class Estimate:
    """Result of parameter estimation; ``e_phase_*`` are None when unavailable."""

    m0_lower: float
    m1_lower: float
    m1_lower_x: float
    e_bit: float
    e_phase_loss_tolerant: Optional[float]
    e_phase_standard: Optional[float]
    e_phase_upper: float
    estimator: str
    n_z: float
    notes: list = field(default_factory=list)

    def bounds(self) -> SecurityBounds:
        return SecurityBounds(
            m0_lower=self.m0_lower,
            m1_lower=self.m1_lower,
            e_phase_upper=self.e_phase_upper,
            e_bit=self.e_bit,
            n_z_sifted=int(round(self.n_z)),
        )


def estimate(
    obs: ObservedCounts,
    cfg,
    *,
    eps: Optional[float] = None,
    e_bit: Optional[float] = None,
    estimator: str = "loss-tolerant",
) -> Estimate:
    """Run the full decoy chain on ``obs``.

    ``eps`` defaults to the per-estimate failure probability of the config's
    budget; pass 1.0 for asymptotic (deviation-free) estimates. The phase
    error used for the key is the loss-tolerant bound unless ``estimator`` is
    "standard". If the chosen estimator has no data, ``e_phase_upper`` is 1.
    """
    if estimator not in ("loss-tolerant", "standard"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if eps is None:
        eps = EpsilonBudget.from_config(cfg).eps_pe
    ps = tuple(cfg.intensity_probs)
    z_counts = IntensityCounts(tuple(obs.z_detected), (0, 0, 0), ps)
    m0 = bound_vacuum_events(z_counts, cfg, eps)
    m1 = bound_single_events(z_counts, m0, cfg, eps)
    x_counts = IntensityCounts(tuple(obs.x_detected), tuple(obs.x_errors), ps)
    m0x = bound_vacuum_events(x_counts, cfg, eps)
    m1x = bound_single_events(x_counts, m0x, cfg, eps)
    notes = []

    try:
        table = single_photon_yield_table(obs.yield_counts(), dict(zip(("0z", "1z", "0x"), obs.pulses_bob_x)), cfg, eps)
        e_lt = estimate_phase_error_loss_tolerant(table, m1, eps)
    except EstimatorUnavailable as exc:
        e_lt = None
        notes.append(f"loss-tolerant estimator unavailable: {exc}")
    try:
        e_std = estimate_phase_error_standard(x_counts, m1, m1x, eps, cfg)
    except EstimatorUnavailable as exc:
        e_std = None
        notes.append(f"standard estimator unavailable: {exc}")

    chosen = e_lt if estimator == "loss-tolerant" else e_std
    if e_bit is None:
        e_bit = obs.e_bit()
    return Estimate(
        m0_lower=m0,
        m1_lower=m1,
        m1_lower_x=m1x,
        e_bit=float(e_bit),
        e_phase_loss_tolerant=e_lt,
        e_phase_standard=e_std,
        e_phase_upper=1.0 if chosen is None else chosen,
        estimator=estimator,
        n_z=obs.n_z,
        notes=notes,
    )


def asymptotic_key_rate_length(est: Estimate, xi: float) -> float:
    """Key length with every finite-size term removed (may be negative)."""
    h_ph = binary_entropy(min(est.e_phase_upper, 0.5))
    h_bit = binary_entropy(min(est.e_bit, 0.5))
    return est.m0_lower + est.m1_lower * (1 - h_ph - xi * h_bit)
