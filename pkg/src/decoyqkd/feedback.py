"""Polarisation-drift compensation driven by interleaved calibration pulses.

Alice reserves the first ``calibration_block`` pulses of every
``calibration_period`` for publicly known states (alternating 0_z and 0_x).
Bob reports the error rate he sees on them, and a dithering coordinate
descent adjusts Alice's compensation angle.

The controller cycles through three probes: the current angle and the
angle offset by plus and minus the dither step. After a full cycle it moves
to the best probe. The step halves when the centre wins or the direction
reverses, and doubles after three moves in the same direction. Key pulses
always use the centre angle; only calibration pulses see the probes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .channel import ChannelModel, DetectorModel, DriftModel, analytic_rates, drift_advance
from .records import X, Z

__all__ = [
    "ControllerState",
    "controller_step",
    "schedule_calibration",
    "calibration_mask",
    "ErrorCurves",
    "error_curves",
    "FeedbackTrace",
    "simulate_feedback",
    "relative_fluctuation",
    "calibrate_drift_sigma",
]

_OFFSETS = (0, 1, -1)


@dataclass(frozen=True)
class ControllerState:
    compensation_angle: float = 0.0
    dither_step: float = 0.05
    calibration_period: int = 1_000_000
    calibration_block: int = 1_000
    last_error: float = math.nan
    history: tuple = ()  # (time, error), newest last
    history_len: int = 256
    dither_min: float = 0.01
    dither_max: float = 0.2
    probe: int = 0  # index into _OFFSETS
    probe_errors: tuple = ()
    last_move: int = 0
    streak: int = 0
    steps: int = 0

    def __post_init__(self):
        if not self.dither_step > 0 or not self.dither_min > 0:
            raise ValueError("dither steps must be positive")
        if self.dither_min > self.dither_max:
            raise ValueError("dither_min exceeds dither_max")
        if self.calibration_block < 100:
            raise ValueError("calibration_block must be at least 100 pulses")
        if self.calibration_block > self.calibration_period:
            raise ValueError("calibration_block exceeds calibration_period")

    @property
    def probe_angle(self) -> float:
        """Angle for the next calibration block."""
        return self.compensation_angle + _OFFSETS[self.probe] * self.dither_step

    @property
    def overhead(self) -> float:
        return self.calibration_block / self.calibration_period


def controller_step(state: ControllerState, observed_error: float, rng=None, time: Optional[float] = None) -> ControllerState:
    """Feed the error measured at ``state.probe_angle``; returns the next state.

    ``rng`` breaks ties between the two side probes; without it the plus
    side wins.
    """
    if not 0.0 <= observed_error <= 1.0:
        raise ValueError("observed_error must lie in [0, 1]")
    t = float(state.steps if time is None else time)
    hist = (state.history + ((t, float(observed_error)),))[-state.history_len :]
    errs = state.probe_errors + (float(observed_error),)
    common = dict(last_error=float(observed_error), history=hist, steps=state.steps + 1)
    if len(errs) < len(_OFFSETS):
        return replace(state, probe=state.probe + 1, probe_errors=errs, **common)

    e0, ep, em = errs
    step = state.dither_step
    centre = state.compensation_angle
    last, streak = state.last_move, state.streak
    if e0 <= ep and e0 <= em:
        step = max(step / 2, state.dither_min)
        streak = 0
    else:
        if ep < em:
            d = 1
        elif em < ep:
            d = -1
        else:
            d = 1 if rng is None or rng.random() < 0.5 else -1
        centre += d * step
        if last == -d:
            step = max(step / 2, state.dither_min)
            streak = 1
        else:
            streak = streak + 1 if last == d else 1
            if streak >= 3:
                step = min(2 * step, state.dither_max)
                streak = 0
        last = d
    return replace(
        state,
        compensation_angle=centre,
        dither_step=step,
        probe=0,
        probe_errors=(),
        last_move=last,
        streak=streak,
        **common,
    )


def schedule_calibration(pulse_index: int, state: ControllerState) -> str:
    """"calibration" for the first block of each period, else "key"."""
    return "calibration" if pulse_index % state.calibration_period < state.calibration_block else "key"


def calibration_mask(start: int, n: int, state: ControllerState) -> np.ndarray:
    idx = np.arange(start, start + n, dtype=np.int64)
    return (idx % state.calibration_period) < state.calibration_block


# -- closed-loop simulation ---------------------------------------------------


@dataclass
class ErrorCurves:
    """Tabulated gains and error rates versus total rotation angle.

    The rotation enters only through 2*rotation, so the curves have period pi.
    """

    angles: np.ndarray
    cal_gain: np.ndarray  # detection probability of a calibration pulse (matched basis)
    cal_error: np.ndarray  # error rate on calibration pulses
    key_error: np.ndarray  # Z-basis e_bit of key pulses

    def _at(self, arr, rotation):
        return np.interp(np.mod(np.asarray(rotation) + math.pi / 2, math.pi) - math.pi / 2, self.angles, arr)

    def calibration(self, rotation):
        return self._at(self.cal_gain, rotation), self._at(self.cal_error, rotation)

    def key(self, rotation):
        return self._at(self.key_error, rotation)


def error_curves(cfg, ch: ChannelModel, det: DetectorModel, n_grid: int = 1025) -> ErrorCurves:
    """Calibration pulses use the signal intensity and states 0_z and 0_x."""
    angles = np.linspace(-math.pi / 2, math.pi / 2, n_grid)
    gain = np.empty(n_grid)
    cal = np.empty(n_grid)
    key = np.empty(n_grid)
    base = replace(ch, misalignment_angle=0.0, drift=DriftModel())
    for i, a in enumerate(angles):
        t = analytic_rates(cfg, replace(base, misalignment_angle=float(a)), det)
        det_p = t.detection()
        gz, gx = det_p[0, 0, Z], det_p[0, 2, X]
        gain[i] = 0.5 * (gz + gx)
        cal[i] = (t.error[0, 0, Z] + t.error[0, 2, X]) / (gz + gx)
        w = t.weight
        zerr = np.sum(w[:, 0, Z] * t.error[:, 0, Z] + w[:, 1, Z] * t.error[:, 1, Z])
        zdet = np.sum(w[:, 0:2, Z] * det_p[:, 0:2, Z])
        key[i] = zerr / zdet
    return ErrorCurves(angles, gain, cal, key)


@dataclass
class FeedbackTrace:
    times: np.ndarray
    drift_angle: np.ndarray
    compensation: np.ndarray
    observed_error: np.ndarray
    key_error: np.ndarray

    def relative_fluctuation(self, window: int = 1) -> float:
        return relative_fluctuation(self.key_error, window)


def relative_fluctuation(series, window: int = 1) -> float:
    """Peak-to-peak of the moving average of ``series`` over its first value."""
    x = np.asarray(series, dtype=float)
    if window > 1:
        window = min(window, x.size)
        x = np.convolve(x, np.ones(window) / window, mode="valid")
    if x.size == 0 or x[0] == 0:
        return math.nan
    return float((x.max() - x.min()) / x[0])


def simulate_feedback(
    cfg,
    ch: ChannelModel,
    det: DetectorModel,
    state: ControllerState,
    duration: float,
    dt: float,
    rng,
    feedback: bool = True,
    curves: Optional[ErrorCurves] = None,
) -> FeedbackTrace:
    """Step drift, calibration measurement and controller every ``dt`` seconds.

    Calibration statistics are drawn from their exact binomial laws using
    the closed-form rates; ``ch.drift`` supplies the initial angle and sigma.
    Without feedback the compensation stays at its initial value.
    """
    g = rng if isinstance(rng, np.random.Generator) else rng.generator()
    if curves is None:
        curves = error_curves(cfg, ch, det)
    n_steps = int(round(duration / dt))
    cal_pulses = int(round(cfg.clock_rate * dt * state.overhead))
    d = ch.drift
    out = np.empty((5, n_steps))
    for i in range(n_steps):
        d = drift_advance(d, dt, g)
        probe = state.probe_angle if feedback else state.compensation_angle
        rot = ch.misalignment_angle + d.current_angle
        gain, err = curves.calibration(rot - probe)
        clicks = g.binomial(cal_pulses, gain)
        errors = g.binomial(clicks, err) if clicks else 0
        observed = errors / clicks if clicks else 0.5
        out[:, i] = ((i + 1) * dt, d.current_angle, state.compensation_angle, observed,
                     curves.key(rot - state.compensation_angle))
        if feedback:
            state = controller_step(state, observed, g, time=(i + 1) * dt)
    return FeedbackTrace(*out)


def calibrate_drift_sigma(
    cfg, ch, det, state, duration, dt, seeds, target: float = 0.5, window: int = 1, lo: float = 1e-5, hi: float = 0.5
) -> float:
    """Drift sigma whose median uncompensated relative fluctuation is ``target``.

    The uncompensated fluctuation grows with sigma for fixed seeds, so a
    bisection in log-sigma suffices.
    """
    curves = error_curves(cfg, ch, det)

    def median_fluct(sigma):
        vals = []
        for s in seeds:
            c = replace(ch, drift=replace(ch.drift, random_walk_sigma=sigma))
            tr = simulate_feedback(cfg, c, det, state, duration, dt, np.random.default_rng(s), False, curves)
            vals.append(tr.relative_fluctuation(window))
        return float(np.median(vals))

    for _ in range(40):
        mid = math.sqrt(lo * hi)
        if median_fluct(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.01:
            break
    return math.sqrt(lo * hi)
