"""Entropy, concentration bounds, the failure-probability budget and key length."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

__all__ = [
    "EpsilonBudget",
    "SecurityBounds",
    "binary_entropy",
    "hoeffding_delta",
    "chernoff_interval",
    "sampling_upper_bound",
    "finite_key_penalty",
    "raw_key_length",
    "secret_key_length",
    "skr_from_length",
]


@dataclass(frozen=True)
class EpsilonBudget:
    """Security parameters.

    Each of the ``n_estimates`` statistical estimates (vacuum and single-photon
    bounds and phase-error bounds) is allowed to fail with probability
    ``eps_pe = eps_sec**2 / n_estimates``. Every one-sided concentration bound in
    :mod:`decoyqkd.decoy` is charged one ``eps_pe``.
    """

    eps_sec: float = 1e-10
    eps_cor: float = 1e-10
    n_estimates: int = 17

    def __post_init__(self):
        if not (0 < self.eps_sec < 1 and 0 < self.eps_cor < 1):
            raise ValueError("eps_sec and eps_cor must lie in (0, 1)")
        if self.n_estimates < 1:
            raise ValueError("n_estimates must be positive")

    @property
    def eps_pe(self) -> float:
        return self.eps_sec**2 / self.n_estimates

    @classmethod
    def from_config(cls, cfg) -> "EpsilonBudget":
        return cls(eps_sec=cfg.eps_sec, eps_cor=cfg.eps_cor)


@dataclass(frozen=True)
class SecurityBounds:
    """Inputs to the key-length formula."""

    m0_lower: float
    m1_lower: float
    e_phase_upper: float
    e_bit: float
    n_z_sifted: int

    def __post_init__(self):
        if self.m0_lower < 0 or self.m1_lower < 0:
            raise ValueError("count bounds must be non-negative")
        if self.m0_lower + self.m1_lower > self.n_z_sifted * (1 + 1e-12):
            raise ValueError("m0_lower + m1_lower exceeds the sifted key size")
        for name in ("e_phase_upper", "e_bit"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def binary_entropy(p: float) -> float:
    """h(p) = -p log2 p - (1-p) log2(1-p), with h(0) = h(1) = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def hoeffding_delta(n: float, eps: float) -> float:
    """One-sided Hoeffding deviation sqrt(n/2 * ln(1/eps)) for n bounded trials."""
    if eps <= 0 or eps > 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0 or eps == 1:
        return 0.0
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


def chernoff_interval(x: float, eps: float) -> tuple:
    """Two one-sided bounds on the mean of a sum of independent Bernoulli trials.

    ``x`` is the observed sum. Each side fails with probability at most
    ``eps``. The lower side uses Bernstein's upper tail
    exp(-t^2 / (2(E + t/3))); the upper side uses the multiplicative lower
    tail exp(-t^2 / (2E)). The deviation scales with sqrt(x) rather than
    with the number of trials.
    """
    if eps <= 0 or eps > 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if x < 0:
        raise ValueError("x must be non-negative")
    if eps == 1:
        return float(x), float(x)
    big_l = math.log(1.0 / eps)
    lower = x + 2.0 * big_l / 3.0 - math.sqrt(2.0 * big_l * x + 4.0 * big_l**2 / 9.0)
    upper = x + big_l + math.sqrt(big_l**2 + 2.0 * big_l * x)
    return max(lower, 0.0), upper


def sampling_upper_bound(k_err: float, n_sample: float, n_target: float, eps: float) -> float:
    """Upper bound on the error rate of ``n_target`` unobserved positions.

    The ``n_sample`` observed positions (``k_err`` of them errors) and the
    targets are a uniformly random split of one population of size
    M = n_sample + n_target. Serfling's inequality for sampling without
    replacement gives, except with probability ``eps``,

        rate_target <= k_err/n_sample + (M/n_target) * sqrt((M - n_sample + 1)/M * ln(1/eps) / (2 n_sample)).

    Counts may be real-valued bounds rather than integers.
    """
    if n_sample <= 0:
        raise ValueError("empty sample")
    if n_target <= 0:
        raise ValueError("n_target must be positive")
    if not 0 <= k_err <= n_sample:
        raise ValueError("k_err must lie in [0, n_sample]")
    if eps <= 0 or eps > 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    observed = k_err / n_sample
    if eps == 1:
        return min(1.0, observed)
    m = n_sample + n_target
    fpc = max(m - n_sample + 1.0, 0.0) / m
    t = math.sqrt(fpc * math.log(1.0 / eps) / (2.0 * n_sample))
    return min(1.0, observed + (m / n_target) * t)


def finite_key_penalty(eps_sec: float, eps_cor: float) -> float:
    """log2(4/eps_sec^2) + log2(2/eps_cor)."""
    return math.log2(4.0 / eps_sec**2) + math.log2(2.0 / eps_cor)


def raw_key_length(
    b: SecurityBounds, budget: EpsilonBudget, xi: float, leakage_ec: Optional[float] = None
) -> float:
    """Key-length expression before flooring and clamping.

    The error-correction charge is xi*h(e_bit) per single-photon event; when the
    reconciliation actually disclosed more (``leakage_ec``), the larger amount is
    charged instead.

    Error rates above 1/2 are evaluated at 1/2: an upper bound of, say, 0.9
    on the phase error rate certifies nothing, while h(0.9) < 1 would
    wrongly credit secrecy.
    """
    if xi < 1:
        raise ValueError("xi must be at least 1")
    h_ph = binary_entropy(min(b.e_phase_upper, 0.5))
    h_bit = binary_entropy(min(b.e_bit, 0.5))
    penalty = finite_key_penalty(budget.eps_sec, budget.eps_cor)
    ec_model = b.m1_lower * xi * h_bit
    if leakage_ec is None or leakage_ec <= ec_model:
        return b.m0_lower + b.m1_lower * (1.0 - h_ph - xi * h_bit) - penalty
    return b.m0_lower + b.m1_lower * (1.0 - h_ph) - float(leakage_ec) - penalty


def secret_key_length(
    b: SecurityBounds, budget: EpsilonBudget, xi: float, leakage_ec: Optional[float] = None
) -> int:
    """Secure key length; 0 means no key can be extracted (abort)."""
    raw = raw_key_length(b, budget, xi, leakage_ec)
    return max(0, math.floor(raw))


def skr_from_length(l: float, duration: float) -> float:
    """Secret key rate in bit/s."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    return l / duration
