"""Decoy-state bounds and both phase-error estimators."""

import math

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoyqkd.channel import (
    ChannelModel,
    DetectorModel,
    analytic_rates,
    sample_tagged_counts,
)
from decoyqkd.config import ProtocolConfig
from decoyqkd.decoy import (
    EstimatorUnavailable,
    IntensityCounts,
    YieldTable,
    bound_single_events,
    bound_vacuum_events,
    estimate_phase_error_loss_tolerant,
    estimate_phase_error_standard,
    reconstruct_yields,
    single_photon_yield_table,
    solve_transmission_rates,
    tau_n,
    upper_single_errors,
    virtual_phase_error,
)
from decoyqkd.estimation import counts_from_rates, counts_from_tagged, estimate
from decoyqkd.records import X
from decoyqkd.security import sampling_upper_bound

LOCAL = ProtocolConfig()

I2, SX, SY, SZ, PROJ = oracles.I2, oracles.SX, oracles.SY, oracles.SZ, oracles.PROJ
rho, apply, yields_from_channel, rotation_kraus = oracles.rho, oracles.apply, oracles.yields_from_channel, oracles.rotation_kraus


# -- photon-number statistics -----------------------------------------------------------


def test_tau_examples():
    assert tau_n(0, intensities=(0.5,), probs=(1.0,)) == pytest.approx(0.60653, abs=1e-5)
    assert sum(tau_n(n, LOCAL) for n in range(51)) == pytest.approx(1.0, abs=1e-12)
    assert tau_n(1, LOCAL) == pytest.approx(0.07392, abs=1e-5)
    assert tau_n(1, LOCAL) == pytest.approx(float(oracles.tau(1, LOCAL.intensities, LOCAL.intensity_probs)), rel=1e-13)
    with pytest.raises(ValueError):
        tau_n(-1, LOCAL)


def test_vacuum_intensity_in_mixture():
    t0 = tau_n(0, intensities=(0.8, 0.3, 0.0), probs=(0.5, 0.25, 0.25))
    assert t0 == pytest.approx(0.5 * math.exp(-0.8) + 0.25 * math.exp(-0.3) + 0.25)


# -- vacuum and single-photon bounds ------------------------------------------------------


def _expected_counts(cfg, n_pulses, yields):
    """Expected detections per intensity for photon-number yields Y_n."""
    out = []
    for mu, p in zip(cfg.intensities, cfg.intensity_probs):
        s = sum(math.exp(-mu) * mu**n / math.factorial(n) * y for n, y in enumerate(yields))
        out.append(n_pulses * p * s)
    return out


def test_zero_counts_give_zero():
    c = IntensityCounts((0, 0, 0), (0, 0, 0), LOCAL.intensity_probs)
    assert bound_vacuum_events(c, LOCAL, 1e-3) == 0
    assert bound_single_events(c, 0, LOCAL, 1e-3) == 0


def test_vacuum_bound_exact_for_dark_only_link():
    y0 = 1e-5
    n = _expected_counts(LOCAL, 1e12, [y0])
    c = IntensityCounts(n, (0, 0, 0), LOCAL.intensity_probs)
    truth = tau_n(0, LOCAL) * 1e12 * y0
    assert bound_vacuum_events(c, LOCAL, 1.0) == pytest.approx(truth, rel=1e-9)


def test_asymptotic_bounds_are_valid_and_tight():
    eta, y0 = 10 ** (-1.5) * 0.85, 3.2e-6
    ys = [y0] + [1 - (1 - y0) * (1 - eta) ** n for n in range(1, 40)]
    n = _expected_counts(LOCAL, 1e11, ys)
    c = IntensityCounts(n, (0, 0, 0), LOCAL.intensity_probs)
    m0 = bound_vacuum_events(c, LOCAL, 1.0)
    m1 = bound_single_events(c, m0, LOCAL, 1.0)
    true0 = tau_n(0, LOCAL) * 1e11 * ys[0]
    true1 = tau_n(1, LOCAL) * 1e11 * ys[1]
    assert m0 <= true0 * (1 + 1e-9)
    assert m1 <= true1 * (1 + 1e-9)
    assert m1 >= 0.95 * true1


def test_vacuum_bound_formula_against_mpmath():
    n = (2.5e6, 3.1e4, 8.0e3)
    c = IntensityCounts(n, (0, 0, 0), LOCAL.intensity_probs)
    _, mu2, mu3 = LOCAL.intensities
    _, p2, p3 = LOCAL.intensity_probs
    mp = oracles.mp
    expect = oracles.tau(0, LOCAL.intensities, LOCAL.intensity_probs) * (
        mu2 * mp.e**mu3 * n[2] / p3 - mu3 * mp.e**mu2 * n[1] / p2
    ) / (mu2 - mu3)
    assert bound_vacuum_events(c, LOCAL, 1.0) == pytest.approx(float(expect), rel=1e-12)


@settings(max_examples=1000, deadline=None)
@given(
    st.lists(st.floats(0, 1e9), min_size=3, max_size=3),
    st.sampled_from([1.0, 1e-3, 1e-10, 1e-21]),
    st.sampled_from([(0.12, 0.012, 0.003), (0.5, 0.03, 0.015), (0.8, 0.3, 0.0)]),
)
def test_bound_clamps(n, eps, mus):
    cfg = ProtocolConfig(intensities=mus)
    c = IntensityCounts(n, (0, 0, 0), cfg.intensity_probs)
    m0 = bound_vacuum_events(c, cfg, eps)
    m1 = bound_single_events(c, m0, cfg, eps)
    assert 0 <= m0 <= c.total
    assert 0 <= m1
    assert m0 + m1 <= c.total * (1 + 1e-12)


def test_counts_invariant():
    with pytest.raises(ValueError):
        IntensityCounts((1, 1, 1), (2, 0, 0), (0.5, 0.25, 0.25))


# -- standard estimator ------------------------------------------------------------------------


def test_standard_examples():
    c = IntensityCounts((1e5, 1e4, 5e3), (0, 0, 0), LOCAL.intensity_probs)
    assert estimate_phase_error_standard(c, 5e4, 1e4, 1.0, LOCAL) == 0.0
    c = IntensityCounts((1e5, 1e4, 5e3), (1e5, 1e4, 5e3), LOCAL.intensity_probs)
    assert estimate_phase_error_standard(c, 5e4, 1e4, 1e-3, LOCAL) == 1.0
    with pytest.raises(EstimatorUnavailable):
        estimate_phase_error_standard(c, 5e4, 0.0, 1e-3, LOCAL)


BENCH = ProtocolConfig(
    n_pulses=10**7,
    intensities=(0.8, 0.3, 0.0),
    intensity_probs=(0.5, 0.25, 0.25),
    alice_basis_probs=(0.5, 0.5),
    bob_basis_probs=(0.5, 0.5),
)


def _single_photon_x_error_rate(cfg, ch, det):
    # expected over an enormous tagged sample: errors / detections of one-photon 0_x pulses in X
    tc = sample_tagged_counts(10**13, cfg, ch, det, np.random.default_rng(0))
    c = tc.counts[:, 2, X, 1]  # one-photon 0_x pulses measured in X, by resolved bit
    return float(c[:, 1].sum() / (c[:, 0].sum() + c[:, 1].sum()))


# weak decoy heavily sampled: the upper bound on single-photon errors stays tight
DEPOL = ProtocolConfig(
    n_pulses=10**7,
    intensities=(0.5, 0.15, 0.0),
    intensity_probs=(0.2, 0.5, 0.3),
    alice_basis_probs=(0.5, 0.5),
    bob_basis_probs=(0.5, 0.5),
)


def test_standard_coverage_on_depolarizing_link():
    """5% single-photon phase error; the bound covers it and is reasonably tight."""
    ch = ChannelModel(depolarization=0.1)
    det = DetectorModel(dark_rate=1000.0)
    truth = _single_photon_x_error_rate(DEPOL, ch, det)
    assert truth == pytest.approx(0.05, abs=0.002)
    g = np.random.default_rng(11)
    bounds = []
    for _ in range(1000):
        obs = counts_from_tagged(sample_tagged_counts(DEPOL.n_pulses, DEPOL, ch, det, g))
        est = estimate(obs, DEPOL, eps=1e-3, estimator="standard")
        bounds.append(est.e_phase_upper)
    bounds = np.array(bounds)
    assert np.mean(bounds < truth) <= 0.01
    assert abs(np.median(bounds) - 0.05) <= 0.03


# -- transmission rates and the loss-tolerant estimator ----------------------------------------------


def test_identity_channel_rates():
    y = YieldTable.from_dict({("0z", "0z"): 1, ("0z", "1z"): 0, ("0z", "0x"): 0.5, ("0x", "0z"): 0.5, ("0x", "1z"): 0.5, ("0x", "0x"): 1})
    r = solve_transmission_rates(y)
    assert np.allclose(r.for_outcome("0z"), (1, 0, 1))
    assert np.allclose(r.for_outcome("0x"), (1, 1, 0))
    assert np.all(np.isnan(r.for_outcome("1x")))


def _random_kraus(rng):
    # a random isometry C^2 -> C^2 (x) C^2 gives two Kraus operators
    a = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    q, _ = np.linalg.qr(a)
    return [q[:2], q[2:]]


def test_random_channels_reconstruct_and_predict():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        kraus = _random_kraus(rng)
        loss = rng.uniform(0.01, 1.0)  # detection efficiency scales every yield
        ys = {k: loss * v for k, v in yields_from_channel(kraus).items()}
        table = YieldTable.from_dict(ys)
        rates = solve_transmission_rates(table)
        back = reconstruct_yields(rates)
        assert np.allclose(back.value, table.value, atol=1e-10)
        # prediction for the unprepared virtual state -x
        direct = {s: loss * float(np.real(np.trace(PROJ[s] @ apply(kraus, rho("-x"))))) for s in ("0x", "1x")}
        for s in ("0x", "1x"):
            dI, dX, _ = rates.for_outcome(s)
            assert 0.5 * (dI - dX) == pytest.approx(direct[s], abs=1e-10)


def test_loss_tolerant_examples():
    ident = YieldTable.from_dict(yields_from_channel([I2]))
    assert estimate_phase_error_loss_tolerant(ident, 1e6, 1.0) == pytest.approx(0.0, abs=1e-12)
    flip = YieldTable.from_dict(yields_from_channel([SZ]))
    assert estimate_phase_error_loss_tolerant(flip, 1e6, 1.0) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("theta", [0.0, 0.05, 0.1412, 0.3, 0.7])
def test_loss_tolerant_rotation(theta):
    table = YieldTable.from_dict(yields_from_channel(rotation_kraus(theta)))
    assert estimate_phase_error_loss_tolerant(table, 1e6, 1.0) == pytest.approx(math.sin(theta) ** 2, abs=1e-6)


def test_loss_tolerant_is_loss_independent():
    table = YieldTable.from_dict({k: 1e-3 * v for k, v in yields_from_channel(rotation_kraus(0.2)).items()})
    assert estimate_phase_error_loss_tolerant(table, 1e6, 1.0) == pytest.approx(math.sin(0.2) ** 2, abs=1e-9)


def test_estimators_agree_on_exact_single_photon_data():
    """Basis-symmetric link, exact single-photon yields: both estimators give the same rate."""
    for theta, depol in [(0.0, 0.05), (0.1, 0.0), (0.2, 0.1), (0.35, 0.02)]:
        kraus = rotation_kraus(theta)
        ys = yields_from_channel(kraus)
        ys = {k: (1 - depol) * v + depol * 0.5 for k, v in ys.items()}
        lt = estimate_phase_error_loss_tolerant(YieldTable.from_dict(ys), 1e6, 1.0)
        # standard: error rate of the 0_x security-check events
        e_x = ys[("1x", "0x")] / (ys[("0x", "0x")] + ys[("1x", "0x")])
        std = sampling_upper_bound(e_x * 1e6, 1e6, 1e6, 1.0)
        assert abs(lt - std) <= 1e-3


def test_virtual_error_needs_x_outcomes():
    t = YieldTable.from_dict({("0z", "0z"): 1, ("0z", "1z"): 0, ("0z", "0x"): 0.5})
    with pytest.raises(EstimatorUnavailable):
        virtual_phase_error(solve_transmission_rates(t))


def test_interval_propagation_is_conservative():
    ys = yields_from_channel(rotation_kraus(0.1))
    t = YieldTable.from_dict(ys)
    point = estimate_phase_error_loss_tolerant(t, 1e6, 1.0)
    t.lower = t.value - 0.01
    t.upper = t.value + 0.01
    assert estimate_phase_error_loss_tolerant(t, 1e6, 1.0) > point


def test_yield_table_from_counts():
    cfg = BENCH
    table = analytic_rates(cfg, ChannelModel(loss_db=3, misalignment_angle=0.1), DetectorModel())
    obs = counts_from_rates(table, 1e9)
    yt = single_photon_yield_table(obs.yield_counts(), dict(zip(("0z", "1z", "0x"), obs.pulses_bob_x)), cfg, 1e-6)
    rows = [2, 3]
    assert np.all(yt.lower[rows] <= yt.value[rows]) and np.all(yt.value[rows] <= yt.upper[rows])
    assert np.all(np.isnan(yt.value[:2]))
    # true single-photon yield of 0_x -> 0x behind 3 dB with an ideal detector
    truth = 10**-0.3 * math.cos(0.1) ** 2
    assert yt.lower[2, 2] <= truth <= yt.upper[2, 2]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1e7), min_size=3, max_size=3), st.floats(0, 1), st.sampled_from([1.0, 1e-6]))
def test_error_bound_clamps(n, frac, eps):
    c = IntensityCounts(n, tuple(v * frac for v in n), LOCAL.intensity_probs)
    v1 = upper_single_errors(c, LOCAL, eps)
    assert 0 <= v1 <= c.total_errors + 1e-9
