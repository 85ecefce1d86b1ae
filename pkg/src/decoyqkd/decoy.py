"""Decoy-state parameter estimation.

Lower bounds on vacuum and single-photon detections come from the
three-intensity decoy inversion. Every per-intensity count of a key or
check set gets a one-sided Hoeffding correction before inversion. The
deviation uses the total count of the set: given the photon numbers of the
detected pulses, the intensity labels are independent draws. The yield
intervals of the loss-tolerant estimator bound expected counts instead and
use per-count Chernoff intervals.

Two phase-error estimators are provided:

* ``estimate_phase_error_standard`` bounds single-photon errors in the X
  security-check sets and transfers the rate to the Z key by random sampling.
* ``estimate_phase_error_loss_tolerant`` uses the X-basis outcomes of all
  three prepared states, mismatched-basis events included. It solves for
  the transmission rates of the identity and Pauli components, then
  evaluates the error rate of the virtual states |+x>, |-x>.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .security import chernoff_interval, hoeffding_delta, sampling_upper_bound

__all__ = [
    "EstimatorUnavailable",
    "IntensityCounts",
    "YieldTable",
    "TransmissionRates",
    "IDEAL_BLOCH",
    "OUTCOMES",
    "STATES",
    "tau_n",
    "bound_vacuum_events",
    "bound_single_events",
    "upper_single_events",
    "upper_single_errors",
    "expected_single_photon_interval",
    "estimate_phase_error_standard",
    "solve_transmission_rates",
    "reconstruct_yields",
    "virtual_phase_error",
    "estimate_phase_error_loss_tolerant",
    "single_photon_yield_table",
]

# Bob outcome order in yield tables: 0_z, 1_z, 0_x, 1_x
OUTCOMES = ("0z", "1z", "0x", "1x")
# prepared-state order: 0_z, 1_z, 0_x
STATES = ("0z", "1z", "0x")
# (x, z) Bloch components of the ideal prepared states; all lie in the X-Z plane
IDEAL_BLOCH = np.array([[0.0, 1.0], [0.0, -1.0], [1.0, 0.0]])


class EstimatorUnavailable(RuntimeError):
    """Not enough data for an estimate; the protocol has to abort."""


def _mixture(cfg_or_mus, probs=None):
    if probs is None:
        return tuple(cfg_or_mus.intensities), tuple(cfg_or_mus.intensity_probs)
    return tuple(cfg_or_mus), tuple(probs)


def tau_n(n: int, cfg=None, *, intensities=None, probs=None) -> float:
    """Probability that a pulse holds exactly ``n`` photons under the intensity mixture."""
    if n < 0:
        raise ValueError("photon number must be non-negative")
    mus, ps = _mixture(cfg, None) if cfg is not None else (tuple(intensities), tuple(probs))
    total = 0.0
    for mu, p in zip(mus, ps):
        if mu == 0:
            total += p if n == 0 else 0.0
        else:
            total += p * math.exp(-mu + n * math.log(mu) - math.lgamma(n + 1))
    return total


@dataclass(frozen=True)
class IntensityCounts:
    """Detections and errors of one sifted set, split by intensity (μ1, μ2, μ3)."""

    n_detected: tuple
    n_errors: tuple
    p_intensity: tuple

    def __post_init__(self):
        object.__setattr__(self, "n_detected", tuple(float(v) for v in self.n_detected))
        object.__setattr__(self, "n_errors", tuple(float(v) for v in self.n_errors))
        object.__setattr__(self, "p_intensity", tuple(float(v) for v in self.p_intensity))
        if not len(self.n_detected) == len(self.n_errors) == len(self.p_intensity) == 3:
            raise ValueError("need counts for all three intensities")
        for d, e in zip(self.n_detected, self.n_errors):
            if e > d or e < 0:
                raise ValueError("n_errors must lie in [0, n_detected]")

    @property
    def total(self) -> float:
        return sum(self.n_detected)

    @property
    def total_errors(self) -> float:
        return sum(self.n_errors)


def _hoeffding_intervals(n, eps):
    delta = hoeffding_delta(sum(n), eps)
    return [v - delta for v in n], [v + delta for v in n]


def _chernoff_intervals(n, eps):
    pairs = [chernoff_interval(v, eps) for v in n]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _vacuum_lower(lo, hi, mus, ps):
    # mu2 * n3 - mu3 * n2 cancels the single-photon term; higher terms are <= 0
    mu1, mu2, mu3 = mus
    n3_lo = math.exp(mu3) / ps[2] * lo[2]
    n2_hi = math.exp(mu2) / ps[1] * hi[1]
    tau0 = tau_n(0, intensities=mus, probs=ps)
    return tau0 * (mu2 * n3_lo - mu3 * n2_hi) / (mu2 - mu3)


def _single_lower(lo, hi, m0l, mus, ps):
    mu1, mu2, mu3 = mus
    denom = mu1 * (mu2 - mu3) - mu2**2 + mu3**2
    if denom <= 0:
        raise ValueError("decoy inversion invalid: need μ1 > μ2 + μ3")
    tau0 = tau_n(0, intensities=mus, probs=ps)
    tau1 = tau_n(1, intensities=mus, probs=ps)
    n1_hi = math.exp(mu1) / ps[0] * hi[0]
    n2_lo = math.exp(mu2) / ps[1] * lo[1]
    n3_hi = math.exp(mu3) / ps[2] * hi[2]
    multi = (mu2**2 - mu3**2) / mu1**2 * (n1_hi - m0l / tau0)
    return mu1 * tau1 / denom * (n2_lo - n3_hi - multi)


def _single_upper(lo, hi, mus, ps):
    # multi-photon terms of e^mu2 n2/p2 - e^mu3 n3/p3 are all non-negative
    mu1, mu2, mu3 = mus
    tau1 = tau_n(1, intensities=mus, probs=ps)
    n2_hi = math.exp(mu2) / ps[1] * hi[1]
    n3_lo = math.exp(mu3) / ps[2] * lo[2]
    return tau1 * (n2_hi - n3_lo) / (mu2 - mu3)


def bound_vacuum_events(counts: IntensityCounts, cfg, eps: float) -> float:
    """Lower bound on detections caused by vacuum pulses (m0^L)."""
    total = counts.total
    if total == 0:
        return 0.0
    lo, hi = _hoeffding_intervals(counts.n_detected, eps)
    m0 = _vacuum_lower(lo, hi, tuple(cfg.intensities), counts.p_intensity)
    return float(min(max(m0, 0.0), total))


def bound_single_events(counts: IntensityCounts, m0L: float, cfg, eps: float) -> float:
    """Lower bound on detections caused by single-photon pulses (m1^L)."""
    total = counts.total
    if total == 0:
        return 0.0
    lo, hi = _hoeffding_intervals(counts.n_detected, eps)
    m1 = _single_lower(lo, hi, m0L, tuple(cfg.intensities), counts.p_intensity)
    return float(min(max(m1, 0.0), max(total - m0L, 0.0)))


def upper_single_events(counts: IntensityCounts, cfg, eps: float) -> float:
    """Upper bound on single-photon detections in a set."""
    total = counts.total
    if total == 0:
        return 0.0
    lo, hi = _hoeffding_intervals(counts.n_detected, eps)
    s1 = _single_upper(lo, hi, tuple(cfg.intensities), counts.p_intensity)
    return float(min(max(s1, 0.0), total))


def upper_single_errors(counts: IntensityCounts, cfg, eps: float) -> float:
    """Upper bound on erroneous single-photon detections in a set."""
    total = counts.total_errors
    if total == 0:
        return 0.0
    lo, hi = _hoeffding_intervals(counts.n_errors, eps)
    v1 = _single_upper(lo, hi, tuple(cfg.intensities), counts.p_intensity)
    return float(min(max(v1, 0.0), total))


def expected_single_photon_interval(n_detected, cfg, eps: float) -> tuple:
    """Interval on the expected number of single-photon detections of a set.

    Unlike the key-set bounds, which concern realised counts, this bounds
    the expectation N_set * tau_1 * Y_1, so each intensity's count gets its
    own multiplicative Chernoff interval.
    """
    n = [float(v) for v in n_detected]
    lo, hi = _chernoff_intervals(n, eps)
    mus, ps = tuple(cfg.intensities), tuple(cfg.intensity_probs)
    m0 = max(_vacuum_lower(lo, hi, mus, ps), 0.0)
    s1_lo = max(_single_lower(lo, hi, m0, mus, ps), 0.0)
    s1_hi = max(_single_upper(lo, hi, mus, ps), s1_lo)
    return s1_lo, s1_hi


def estimate_phase_error_standard(
    x_counts: IntensityCounts, m1L_z: float, m1L_x: float, eps: float, cfg
) -> float:
    """Phase-error upper bound from the X security-check sets.

    The single-photon error rate of the X sample is bounded by decoy
    inversion on the error counts. It is then carried over to the Z
    single-photon population by a sampling-without-replacement bound.
    """
    if m1L_x < 1:
        raise EstimatorUnavailable("no single-photon events in the X security-check sets")
    if m1L_z < 1:
        raise EstimatorUnavailable("no single-photon events in the key sets")
    v1 = upper_single_errors(x_counts, cfg, eps)
    k = min(v1, m1L_x)
    return sampling_upper_bound(k, m1L_x, m1L_z, eps)


@dataclass
class YieldTable:
    """Observed detection fractions Y(s|j) for Bob outcome s and prepared state j.

    ``value`` has shape (4, 3) with rows ordered as ``OUTCOMES`` and columns as
    ``STATES``; NaN marks an unmeasured entry. ``lower``/``upper`` optionally
    hold confidence intervals for finite-size estimation; ``denominators``
    records the number of pulses each fraction was taken over.
    """

    value: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    denominators: Optional[np.ndarray] = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        if self.value.shape != (4, 3):
            raise ValueError("yield table must have shape (4, 3)")
        finite = self.value[np.isfinite(self.value)]
        if np.any(finite < -1e-12) or np.any(finite > 1 + 1e-12):
            raise ValueError("yields must lie in [0, 1]")
        for name in ("lower", "upper"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(self, name, np.asarray(arr, dtype=float))

    @classmethod
    def from_dict(cls, entries: dict) -> "YieldTable":
        """Build from ``{("0x", "0z"): y, ...}`` keyed by (outcome, state)."""
        value = np.full((4, 3), np.nan)
        for (s, j), y in entries.items():
            value[OUTCOMES.index(s), STATES.index(j)] = y
        return cls(value)

    def has_intervals(self) -> bool:
        return self.lower is not None and self.upper is not None


@dataclass
class TransmissionRates:
    """Per-outcome coefficients (d_I, d_X, d_Z); rows follow ``OUTCOMES``, NaN if unsolved."""

    coeffs: np.ndarray
    bloch: np.ndarray = field(default_factory=lambda: IDEAL_BLOCH.copy())

    def for_outcome(self, s: str) -> np.ndarray:
        return self.coeffs[OUTCOMES.index(s)]


def _design_matrix(bloch):
    bloch = np.asarray(bloch, dtype=float)
    return 0.5 * np.column_stack([np.ones(3), bloch[:, 0], bloch[:, 1]])


def solve_transmission_rates(y: YieldTable, bloch=IDEAL_BLOCH, outcomes: Optional[Sequence[str]] = None) -> TransmissionRates:
    """Solve Y(s|j) = (d_I + n_j . d) / 2 for every outcome with a full column of yields."""
    a = _design_matrix(bloch)
    if abs(np.linalg.det(a)) < 1e-12:
        raise ValueError("prepared Bloch vectors do not determine the transmission rates")
    if outcomes is None:
        outcomes = [s for i, s in enumerate(OUTCOMES) if np.any(np.isfinite(y.value[i]))]
    coeffs = np.full((4, 3), np.nan)
    for s in outcomes:
        row = y.value[OUTCOMES.index(s)]
        if not np.all(np.isfinite(row)):
            raise ValueError(f"missing yields for outcome {s}")
        coeffs[OUTCOMES.index(s)] = np.linalg.solve(a, row)
    return TransmissionRates(coeffs, np.asarray(bloch, dtype=float).copy())


def reconstruct_yields(rates: TransmissionRates) -> YieldTable:
    a = _design_matrix(rates.bloch)
    value = np.full((4, 3), np.nan)
    for i in range(4):
        if np.all(np.isfinite(rates.coeffs[i])):
            value[i] = a @ rates.coeffs[i]
    return YieldTable(np.clip(value, 0.0, 1.0))


def virtual_phase_error(rates: TransmissionRates) -> float:
    """Error rate of the virtual |±x> states measured in X, unclamped ratio.

    Raises EstimatorUnavailable when the virtual yields sum to zero.
    """
    d0 = rates.for_outcome("0x")
    d1 = rates.for_outcome("1x")
    if not (np.all(np.isfinite(d0)) and np.all(np.isfinite(d1))):
        raise EstimatorUnavailable("transmission rates for X outcomes are missing")
    # Y_vir(s | ±x) = (d_I ± d_X) / 2
    y0_plus, y0_minus = 0.5 * (d0[0] + d0[1]), 0.5 * (d0[0] - d0[1])
    y1_plus, y1_minus = 0.5 * (d1[0] + d1[1]), 0.5 * (d1[0] - d1[1])
    denom = y0_plus + y0_minus + y1_plus + y1_minus
    if denom <= 0:
        raise EstimatorUnavailable("virtual-state yields vanish")
    return (y1_plus + y0_minus) / denom


def _worst_case_phase_error(y: YieldTable, bloch) -> float:
    rows = [OUTCOMES.index("0x"), OUTCOMES.index("1x")]
    lo = np.clip(y.lower[rows], 0.0, 1.0)
    hi = np.clip(y.upper[rows], 0.0, 1.0)
    if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)):
        raise EstimatorUnavailable("yield intervals for X outcomes are missing")
    worst = 0.0
    value = np.full((4, 3), np.nan)
    # the ratio is linear-fractional in the yields, so its maximum over the
    # interval box sits at a vertex
    for corner in itertools.product((0, 1), repeat=6):
        pick = np.array(corner, dtype=bool).reshape(2, 3)
        value[rows] = np.where(pick, hi, lo)
        rates = solve_transmission_rates(YieldTable(value.copy()), bloch, outcomes=("0x", "1x"))
        try:
            e = virtual_phase_error(rates)
        except EstimatorUnavailable:
            return 1.0
        worst = max(worst, e)
        if worst >= 1.0:
            return 1.0
    return worst


def estimate_phase_error_loss_tolerant(rates, m1L_z: float, eps: float, bloch=IDEAL_BLOCH) -> float:
    """Phase-error upper bound from transmission rates of the X-basis outcomes.

    ``rates`` is either solved ``TransmissionRates`` (point yields) or a
    ``YieldTable`` carrying lower/upper intervals. With intervals, every
    yield is pushed to the end of its interval that increases the ratio
    before the solve. The virtual-state rate is then carried to the
    ``m1L_z`` single-photon key events with a Hoeffding term.
    """
    if isinstance(rates, YieldTable):
        if rates.has_intervals():
            e = _worst_case_phase_error(rates, bloch)
        else:
            e = virtual_phase_error(solve_transmission_rates(rates, bloch, outcomes=("0x", "1x")))
    else:
        e = virtual_phase_error(rates)
    e = min(max(e, 0.0), 1.0)
    if eps < 1:
        if m1L_z < 1:
            raise EstimatorUnavailable("no single-photon events in the key sets")
        e += math.sqrt(math.log(1.0 / eps) / (2.0 * m1L_z))
    return min(e, 1.0)


def single_photon_yield_table(
    counts: dict, pulses: dict, cfg, eps: float
) -> YieldTable:
    """Single-photon yield intervals for Bob's X outcomes.

    ``counts[(s, j)]`` holds per-intensity detections (a length-3 sequence) of
    outcome s in {"0x", "1x"} for prepared state j with Bob measuring X;
    ``pulses[j]`` is the number of pulses prepared in state j and measured in
    X. Single-photon detections are bounded by decoy inversion, then divided by
    the expected number of single-photon pulses. The point value is the
    interval midpoint.
    """
    tau1 = tau_n(1, cfg)
    value = np.full((4, 3), np.nan)
    lower = np.full((4, 3), np.nan)
    upper = np.full((4, 3), np.nan)
    denom = np.full((4, 3), np.nan)
    for (s, j), n in counts.items():
        lo, hi = expected_single_photon_interval(n, cfg, eps)
        n1 = pulses[j] * tau1
        if n1 <= 0:
            raise EstimatorUnavailable(f"no pulses prepared in state {j}")
        i, k = OUTCOMES.index(s), STATES.index(j)
        lower[i, k] = lo / n1
        upper[i, k] = hi / n1
        value[i, k] = 0.5 * (lower[i, k] + upper[i, k])
        denom[i, k] = n1
    value = np.clip(value, 0.0, 1.0)
    return YieldTable(value, lower, upper, denom)
