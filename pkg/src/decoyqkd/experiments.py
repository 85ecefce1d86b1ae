"""Experiment runner: loss sweeps, single operating points and the feedback demo.

Presets bundle a protocol configuration, a detector and the bit error rate
the link is fitted to. The fit adjusts one static misalignment angle so that
the closed-form e_bit at the anchor loss matches the target; everything else
follows from the model.

Sweep rows have fixed columns (``SWEEP_COLUMNS``). ``e_phase`` is the
finite-key upper bound used for the key; ``e_phase_asymptotic`` is the same
estimator with all statistical deviations removed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .channel import ChannelModel, DeadTimeState, DetectorModel, DriftModel, analytic_rates, sample_tagged_counts, simulate_block
from .config import ProtocolConfig, require_valid
from .estimation import ObservedCounts, asymptotic_key_rate_length, counts_from_records, counts_from_rates, counts_from_tagged, estimate
from .feedback import ControllerState, error_curves, simulate_feedback
from .protocol import Physics, SessionOptions, run_session
from .rng import RandomStream
from .security import EpsilonBudget, secret_key_length, skr_from_length

__all__ = [
    "Preset",
    "PRESETS",
    "MODES",
    "SWEEP_COLUMNS",
    "FEEDBACK_COLUMNS",
    "FIBER_LOSS_DB_PER_KM",
    "ExperimentSpec",
    "fit_misalignment",
    "channel_error_rate",
    "expected_counts",
    "montecarlo_counts",
    "sweep_row",
    "run_sweep",
    "session_setup",
    "run_operating_point",
    "feedback_demo_setup",
    "run_feedback_demo",
    "rows_to_csv",
    "rows_to_json",
    "write_rows",
]

MODES = ("analytic", "montecarlo", "session", "feedback-demo")
FIBER_LOSS_DB_PER_KM = 0.2
SWEEP_COLUMNS = (
    "loss_db",
    "distance_km",
    "skr_finite",
    "skr_asymptotic",
    "e_bit",
    "e_phase",
    "e_phase_asymptotic",
    "l",
    "n_z",
)
FEEDBACK_COLUMNS = ("time_s", "drift_angle", "compensation", "observed_error", "key_error")


@dataclass(frozen=True)
class Preset:
    name: str
    cfg: ProtocolConfig
    detector: DetectorModel
    anchor_loss_db: float
    target_e_bit: float
    estimator: str = "loss-tolerant"
    depolarization: float = 0.0
    description: str = ""


PRESETS = {
    "wsi-local": Preset(
        "wsi-local",
        ProtocolConfig(),
        DetectorModel(efficiency=0.85, dark_rate=1000.0, max_count_rate=5e6),
        anchor_loss_db=9.2,
        target_e_bit=0.02,
        description="metropolitan link, WSi detectors (85%, 1000 cps, 5 Mcps max)",
    ),
    "nbn-intercity": Preset(
        "nbn-intercity",
        ProtocolConfig(intensities=(0.5, 0.03, 0.015)),
        DetectorModel(efficiency=0.30, dark_rate=1000.0),
        anchor_loss_db=16.4,
        target_e_bit=0.0282,
        description="intercity link, NbN detectors (30%, 1000 cps)",
    ),
    # Small-N laboratory settings under which a complete session still
    # extracts key: vacuum decoy, symmetric bases, X-basis estimator.
    "bench": Preset(
        "bench",
        ProtocolConfig(
            n_pulses=1_000_000,
            intensities=(0.8, 0.3, 0.0),
            intensity_probs=(0.5, 0.25, 0.25),
            alice_basis_probs=(0.5, 0.5),
            bob_basis_probs=(0.5, 0.5),
        ),
        DetectorModel(efficiency=1.0, dark_rate=1000.0),
        anchor_loss_db=0.0,
        target_e_bit=0.02,
        estimator="standard",
        description="back-to-back bench link, 2% misalignment error",
    ),
}


@dataclass
class ExperimentSpec:
    mode: str = "analytic"
    preset: str = "wsi-local"
    sweep: tuple = ()
    cfg: Optional[ProtocolConfig] = None  # defaults to the preset's
    scale: float = 1.0
    seed: int = 0
    output_path: Optional[str] = None
    estimator: Optional[str] = None
    misalignment: Optional[float] = None  # fitted when None
    depolarization: Optional[float] = None
    force_e_bit: Optional[float] = None
    feedback: bool = True
    workers: int = 1
    # feedback demo
    duration: float = 450.0
    dt: float = 0.5
    drift_sigma: float = 0.00429
    smoothing: int = 20
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {tuple(PRESETS)}")
        if self.mode in ("analytic", "montecarlo") and not self.sweep:
            raise ValueError("a sweep needs at least one loss value")
        if not 0 < self.scale <= 1:
            raise ValueError("scale must lie in (0, 1]")
        self.sweep = tuple(sorted(float(v) for v in self.sweep))

    @property
    def preset_obj(self) -> Preset:
        return PRESETS[self.preset]

    @property
    def config(self) -> ProtocolConfig:
        return require_valid(self.cfg if self.cfg is not None else self.preset_obj.cfg)

    @property
    def estimator_name(self) -> str:
        return self.estimator or self.preset_obj.estimator

    @property
    def scaled_pulses(self) -> int:
        return max(1, int(round(self.config.n_pulses * self.scale)))


# -- link fitting -----------------------------------------------------------------


def channel_error_rate(cfg, ch: ChannelModel, det: DetectorModel) -> float:
    """Closed-form Z-basis bit error rate of the sifted key."""
    return counts_from_rates(analytic_rates(cfg, ch, det), cfg.n_pulses).e_bit()


def fit_misalignment(cfg, det: DetectorModel, loss_db: float, target_e_bit: float, depolarization: float = 0.0) -> float:
    """Static rotation angle giving ``target_e_bit`` at ``loss_db``.

    e_bit increases with the angle on [0, pi/4], so a bracketing root finder
    is enough. Raises ValueError if the target is below the error floor set by
    dark counts and depolarisation.
    """

    def f(theta):
        ch = ChannelModel(loss_db=loss_db, misalignment_angle=theta, depolarization=depolarization)
        return channel_error_rate(cfg, ch, det) - target_e_bit

    lo, hi = 0.0, math.pi / 4
    if f(lo) > 0:
        raise ValueError(f"e_bit {target_e_bit} is below the link's error floor {f(lo) + target_e_bit:.4g}")
    if f(hi) < 0:
        raise ValueError(f"e_bit {target_e_bit} is not reachable by misalignment")
    return float(brentq(f, lo, hi, xtol=1e-12))


def _misalignment(spec: ExperimentSpec, cfg) -> float:
    p = spec.preset_obj
    if spec.misalignment is not None:
        return spec.misalignment
    target = spec.force_e_bit if spec.force_e_bit is not None else p.target_e_bit
    return fit_misalignment(cfg, p.detector, p.anchor_loss_db, target, _depol(spec))


def _depol(spec: ExperimentSpec) -> float:
    return spec.depolarization if spec.depolarization is not None else spec.preset_obj.depolarization


# -- sweeps ------------------------------------------------------------------------


def expected_counts(cfg, ch: ChannelModel, det: DetectorModel) -> ObservedCounts:
    """Closed-form expected counts of the full ``cfg.n_pulses``."""
    return counts_from_rates(analytic_rates(cfg, ch, det), cfg.n_pulses)


def montecarlo_counts(cfg, ch: ChannelModel, det: DetectorModel, n: int, rng: RandomStream, block: int = 1 << 20) -> ObservedCounts:
    """Simulated counts of ``n`` pulses.

    Without dead time the pulses are independent and the cell counts are
    drawn in one multinomial step; with dead time the pulse-level simulator
    runs block by block.
    """
    if det.dead_pulses(cfg.clock_rate) == 0:
        return counts_from_tagged(sample_tagged_counts(n, cfg, ch, det, rng.generator()))
    dead = DeadTimeState()
    total = None
    for i, start in enumerate(range(0, n, block)):
        m = min(block, n - start)
        rec, _ = simulate_block(m, cfg, ch, det, rng.child(f"block{i}"), start_index=start, dead_state=dead)
        obs = counts_from_records(rec)
        total = obs if total is None else _add_counts(total, obs)
    return total


def _add_counts(a: ObservedCounts, b: ObservedCounts) -> ObservedCounts:
    return ObservedCounts(
        z_detected=a.z_detected + b.z_detected,
        x_detected=a.x_detected + b.x_detected,
        x_errors=a.x_errors + b.x_errors,
        mismatch=a.mismatch + b.mismatch,
        pulses_bob_x=a.pulses_bob_x + b.pulses_bob_x,
        n_pulses=a.n_pulses + b.n_pulses,
        z_errors=a.z_errors + b.z_errors,
    )


def sweep_row(obs: ObservedCounts, cfg, loss_db: float, estimator: str = "loss-tolerant") -> dict:
    """Key rates and error rates from counts of the full ``cfg.n_pulses``."""
    est = estimate(obs, cfg, estimator=estimator)
    l = secret_key_length(est.bounds(), EpsilonBudget.from_config(cfg), cfg.xi)
    asym = estimate(obs, cfg, eps=1.0, estimator=estimator)
    l_asym = max(0.0, asymptotic_key_rate_length(asym, cfg.xi))
    return {
        "loss_db": float(loss_db),
        "distance_km": round(float(loss_db) / FIBER_LOSS_DB_PER_KM, 9),
        "skr_finite": float(skr_from_length(l, cfg.duration)),
        "skr_asymptotic": float(skr_from_length(l_asym, cfg.duration)),
        "e_bit": float(est.e_bit),
        "e_phase": float(est.e_phase_upper),
        "e_phase_asymptotic": float(asym.e_phase_upper),
        "l": int(l),
        "n_z": float(obs.n_z),
    }


def _sweep_point(spec: ExperimentSpec, cfg, theta: float, loss: float) -> dict:
    p = spec.preset_obj
    ch = ChannelModel(loss_db=loss, misalignment_angle=theta, depolarization=_depol(spec))
    if spec.mode == "analytic":
        obs = expected_counts(cfg, ch, p.detector)
    else:
        rs = RandomStream(spec.seed, f"sweep-{loss!r}")
        obs = montecarlo_counts(cfg, ch, p.detector, spec.scaled_pulses, rs)
        obs = obs.scaled(cfg.n_pulses / spec.scaled_pulses)
    return sweep_row(obs, cfg, loss, spec.estimator_name)


def run_sweep(spec: ExperimentSpec) -> list:
    """One row per loss value, sorted by loss.

    Analytic mode uses expected counts at the full N; montecarlo mode
    simulates ``scale * N`` pulses and scales the counts up to N. Each loss
    point draws from its own substream, so rows do not depend on the order
    or parallelism of evaluation.
    """
    if spec.mode not in ("analytic", "montecarlo"):
        raise ValueError("run_sweep needs mode analytic or montecarlo")
    cfg = spec.config
    theta = _misalignment(spec, cfg)
    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            rows = list(pool.map(lambda L: _sweep_point(spec, cfg, theta, L), spec.sweep))
    else:
        rows = [_sweep_point(spec, cfg, theta, L) for L in spec.sweep]
    return sorted(rows, key=lambda r: r["loss_db"])


# -- sessions ------------------------------------------------------------------------


def session_setup(spec: ExperimentSpec):
    """(cfg, physics, options) of a session at ``scale * N`` pulses."""
    p = spec.preset_obj
    cfg = spec.config
    theta = _misalignment(spec, cfg)
    loss = spec.sweep[0] if spec.sweep else p.anchor_loss_db
    cfg_run = cfg.with_(n_pulses=spec.scaled_pulses)
    physics = Physics(ChannelModel(loss_db=loss, misalignment_angle=theta, depolarization=_depol(spec)), p.detector)
    return cfg_run, physics, SessionOptions(estimator=spec.estimator_name)


def run_operating_point(spec: ExperimentSpec, link=None) -> dict:
    """Run a full two-party session at the scaled N; returns Alice's report."""
    cfg, physics, opts = session_setup(spec)
    res = run_session(cfg, physics, link=link, seed=spec.seed, options=opts)
    return res.report


# -- feedback demo -------------------------------------------------------------------


def feedback_demo_setup(spec: ExperimentSpec):
    """(cfg, channel, detector, controller) for the drift-compensation demo.

    The static misalignment is left to the controller; a small depolarisation
    sets the error floor the loop converges to.
    """
    p = spec.preset_obj
    cfg = spec.config
    depol = spec.depolarization if spec.depolarization is not None else 0.05
    loss = spec.sweep[0] if spec.sweep else p.anchor_loss_db
    ch = ChannelModel(loss_db=loss, depolarization=depol, drift=DriftModel(random_walk_sigma=spec.drift_sigma))
    state = ControllerState(dither_step=0.05, dither_min=0.02, calibration_period=1_000_000, calibration_block=100_000)
    return cfg, ch, p.detector, state


def run_feedback_demo(spec: ExperimentSpec):
    """Drift with and without compensation; returns (rows, summary)."""
    cfg, ch, det, state = feedback_demo_setup(spec)
    curves = error_curves(cfg, ch, det)
    traces = {}
    for on in (True, False):
        g = RandomStream(spec.seed, "feedback-demo").generator()
        traces[on] = simulate_feedback(cfg, ch, det, state, spec.duration, spec.dt, g, on, curves)
    tr = traces[spec.feedback]
    rows = [
        dict(zip(FEEDBACK_COLUMNS, map(float, vals)))
        for vals in zip(tr.times, tr.drift_angle, tr.compensation, tr.observed_error, tr.key_error)
    ]
    summary = {
        "feedback": spec.feedback,
        "drift_sigma": spec.drift_sigma,
        "smoothing": spec.smoothing,
        "calibration_overhead": state.overhead,
        "relative_fluctuation_on": traces[True].relative_fluctuation(spec.smoothing),
        "relative_fluctuation_off": traces[False].relative_fluctuation(spec.smoothing),
        "mean_key_error_on": float(np.mean(traces[True].key_error)),
        "mean_key_error_off": float(np.mean(traces[False].key_error)),
    }
    return rows, summary


# -- output --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns=SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def rows_to_json(rows, columns=SWEEP_COLUMNS) -> str:
    return json.dumps([{c: r[c] for c in columns} for r in rows], indent=2) + "\n"


def write_rows(rows, path, columns=SWEEP_COLUMNS) -> None:
    """CSV to ``path`` and the same rows as JSON next to it."""
    path = Path(path)
    path.write_text(rows_to_csv(rows, columns))
    path.with_suffix(".json").write_text(rows_to_json(rows, columns))
