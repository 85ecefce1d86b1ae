"""Key rate and error rates versus channel loss for both link presets.

    python3 demos/sweep.py
"""

from decoyqkd.experiments import ExperimentSpec, run_sweep

for preset, sweep in [("wsi-local", (9.2, 12.2, 15.2, 18.2, 21.2, 24.2)), ("nbn-intercity", (16.4,))]:
    print(f"{preset}")
    print(f"{'loss dB':>8} {'km':>6} {'SKR kbps':>10} {'asym kbps':>10} {'e_bit %':>8} {'e_phase %':>10}")
    for r in run_sweep(ExperimentSpec(mode="analytic", preset=preset, sweep=sweep)):
        print(
            f"{r['loss_db']:8.1f} {r['distance_km']:6.0f} {r['skr_finite'] / 1e3:10.1f} "
            f"{r['skr_asymptotic'] / 1e3:10.1f} {100 * r['e_bit']:8.2f} {100 * r['e_phase']:10.2f}"
        )
    print()
