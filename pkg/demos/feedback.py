"""Polarisation drift with and without the compensation loop.

    python3 demos/feedback.py [seed]
"""

import sys

import numpy as np

from decoyqkd.experiments import ExperimentSpec, run_feedback_demo

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rows, summary = run_feedback_demo(ExperimentSpec(mode="feedback-demo", preset="nbn-intercity", seed=seed))
print(f"drift sigma {summary['drift_sigma']} rad/sqrt(s), calibration overhead {summary['calibration_overhead']:.0%}")
print(f"relative e_bit fluctuation: {summary['relative_fluctuation_on']:.1%} with feedback, {summary['relative_fluctuation_off']:.1%} without")
print(f"mean e_bit: {summary['mean_key_error_on']:.4f} with feedback, {summary['mean_key_error_off']:.4f} without")
t = np.array([r["time_s"] for r in rows])
for i in np.linspace(0, len(rows) - 1, 10).astype(int):
    r = rows[i]
    print(f"  t={t[i]:6.1f} s  drift {r['drift_angle']:+.3f}  comp {r['compensation']:+.3f}  e_bit {r['key_error']:.4f}")
