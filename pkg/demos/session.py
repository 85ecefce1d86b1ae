"""One complete two-party session on the bench link, then a forced 12% error link.

    python3 demos/session.py [seed]
"""

import sys

import numpy as np

from decoyqkd.experiments import ExperimentSpec, session_setup
from decoyqkd.protocol import run_session

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

cfg, physics, opts = session_setup(ExperimentSpec(mode="session", preset="bench"))
res = run_session(cfg, physics, seed=seed, options=opts)
r = res.report
print("phases:", " -> ".join(dict.fromkeys(r["phase_history"])))
print(f"sifted Z: {r['counts']['n_z']}, e_bit {r['bounds']['e_bit']:.4f}, e_phase <= {r['bounds']['e_phase_upper']:.4f}")
print(f"cascade disclosed {r['leakage_bits']} bits, verification {r['verify_bits_published']} bits")
print(f"final key {r['key_length']} bits, keys equal: {np.array_equal(res.key.final_key_a, res.key.final_key_b)}")
print(f"{r['transcript']['frames']} frames, {r['transcript']['bytes_sent']} bytes sent by Alice")

cfg, physics, opts = session_setup(ExperimentSpec(mode="session", preset="bench", force_e_bit=0.12))
r = run_session(cfg, physics, seed=seed, options=opts).report
print(f"\n12% error link: {r['phase']} ({r['abort_reason']}), e_phase <= {r['estimates']['e_phase_upper']:.3f}")
