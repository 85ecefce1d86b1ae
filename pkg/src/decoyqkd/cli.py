"""Command-line entry point.

    decoyqkd analytic --preset wsi-local --loss-db 9.2 --loss-db 24.2 --out sweep.csv
    decoyqkd montecarlo --preset wsi-local --loss-db 9.2 --scale 1e-4
    decoyqkd session --preset bench --seed 3
    decoyqkd session --preset bench --two-process --port 0
    decoyqkd feedback-demo --feedback on --out trace.csv

Exit codes: 0 success (session done), 2 session aborted, 3 bad configuration
or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_config
from .experiments import (
    FEEDBACK_COLUMNS,
    MODES,
    PRESETS,
    ExperimentSpec,
    rows_to_csv,
    run_feedback_demo,
    run_sweep,
    session_setup,
    write_rows,
)
from .feedback import ControllerState
from .protocol import report_json, run_party, run_session
from .transport import parse_hostport, tcp_connect, tcp_listen

log = logging.getLogger("decoyqkd")

EXIT_OK, EXIT_ABORTED, EXIT_CONFIG = 0, 2, 3

# session-level controller: 2^14 calibration pulses every 2^18 (6.25%)
SESSION_CONTROLLER = ControllerState(calibration_period=1 << 18, calibration_block=1 << 14)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2, which here means "session aborted"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="decoyqkd", description="Decoy-state BB84 key-rate experiments and simulated sessions.")
    p.add_argument("mode_pos", nargs="?", choices=MODES, metavar="MODE", help=f"one of {', '.join(MODES)}")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--preset", default=None, choices=sorted(PRESETS))
    p.add_argument("--loss-db", type=float, action="append", default=[], help="channel loss in dB (repeatable)")
    p.add_argument("--scale", type=float, default=None, help="fraction of N actually simulated")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output file (CSV for sweeps, JSON for sessions)")
    p.add_argument("--config", default=None, help="ProtocolConfig JSON overriding the preset's")
    p.add_argument("--estimator", choices=("loss-tolerant", "standard"), default=None)
    p.add_argument("--force-ebit", type=float, default=None, help="fit the link to this bit error rate instead")
    p.add_argument("--feedback", choices=("on", "off"), default=None)
    p.add_argument("--two-process", action="store_true", help="run Bob in a child process over TCP")
    p.add_argument("--port", type=int, default=0, help="listening port for --two-process (0 picks a free one)")
    p.add_argument("--role", choices=("alice", "bob"), default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--listen", metavar="HOST:PORT")
    g.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep points")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _default_preset(mode):
    return "nbn-intercity" if mode == "feedback-demo" else "wsi-local"


def _default_scale(mode, preset):
    if mode == "montecarlo":
        return 1e-4
    if mode == "session":
        return 1.0 if preset == "bench" else 1e-5
    return 1.0


def spec_from_args(ns) -> ExperimentSpec:
    mode = ns.mode or ns.mode_pos or "analytic"
    preset = ns.preset or _default_preset(mode)
    cfg = load_config(ns.config) if ns.config else None
    sweep = tuple(ns.loss_db)
    if not sweep and mode in ("analytic", "montecarlo"):
        sweep = (9.2, 12.2, 15.2, 18.2, 21.2, 24.2) if preset == "wsi-local" else (PRESETS[preset].anchor_loss_db,)
    feedback = ns.feedback == "on" if ns.feedback else mode == "feedback-demo"
    return ExperimentSpec(
        mode=mode,
        preset=preset,
        sweep=sweep,
        cfg=cfg,
        scale=ns.scale if ns.scale is not None else _default_scale(mode, preset),
        seed=ns.seed,
        output_path=ns.out,
        estimator=ns.estimator,
        force_e_bit=ns.force_ebit,
        feedback=feedback,
        workers=ns.workers,
    )


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _session_inputs(spec: ExperimentSpec):
    cfg, physics, opts = session_setup(spec)
    if spec.feedback:
        opts = replace(opts, feedback=SESSION_CONTROLLER)
    return cfg, physics, opts


def _child_args(ns, port: int) -> list:
    """Arguments that make a child process play Bob in the same session."""
    args = [sys.executable, "-m", "decoyqkd", "session", "--role", "bob", "--connect", f"127.0.0.1:{port}", "--seed", str(ns.seed)]
    for flag in ("preset", "scale", "config", "estimator", "force_ebit", "feedback"):
        v = getattr(ns, flag)
        if v is not None:
            args += ["--" + flag.replace("_", "-"), str(v)]
    for L in ns.loss_db:
        args += ["--loss-db", repr(L)]
    return args


def run_session_mode(spec: ExperimentSpec, ns) -> int:
    cfg, physics, opts = _session_inputs(spec)
    if ns.two_process:
        child = {}

        def spawn(port):
            log.info("listening on port %d, starting Bob", port)
            child["proc"] = subprocess.Popen(_child_args(ns, port), stdout=subprocess.DEVNULL)

        ep = tcp_listen("127.0.0.1", ns.port, opts.auth_key, timeout=opts.timeout, ready=spawn)
        try:
            res = run_party("alice", cfg, physics, ep, spec.seed, opts)
        finally:
            ep.close()
            if "proc" in child:
                child["proc"].wait(timeout=opts.timeout)
        report = res.report
    elif ns.listen or ns.connect:
        role = ns.role or ("alice" if ns.listen else "bob")
        host, port = parse_hostport(ns.listen or ns.connect)
        if ns.listen:
            ep = tcp_listen(host, port, opts.auth_key, timeout=opts.timeout)
        else:
            ep = tcp_connect(host, port, opts.auth_key)
        try:
            res = run_party(role, cfg, physics, ep, spec.seed, opts)
        finally:
            ep.close()
        report = res.report
    else:
        report = run_session(cfg, physics, seed=spec.seed, options=opts).report
    _emit(report_json(report), spec.output_path)
    if report["phase"] != "done":
        log.warning("session aborted: %s", report["abort_reason"])
        return EXIT_ABORTED
    return EXIT_OK


def run_sweep_mode(spec: ExperimentSpec) -> int:
    rows = run_sweep(spec)
    if spec.output_path:
        write_rows(rows, spec.output_path)
    else:
        sys.stdout.write(rows_to_csv(rows))
    return EXIT_OK


def run_feedback_mode(spec: ExperimentSpec) -> int:
    rows, summary = run_feedback_demo(spec)
    if spec.output_path:
        write_rows(rows, spec.output_path, FEEDBACK_COLUMNS)
        sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(rows_to_csv(rows, FEEDBACK_COLUMNS))
        sys.stderr.write(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        spec = spec_from_args(ns)
        if spec.output_path:
            parent = Path(spec.output_path).resolve().parent
            if not parent.is_dir():
                raise ConfigError([f"output directory {parent} does not exist"])
        if spec.mode == "session":
            return run_session_mode(spec, ns)
        if spec.mode == "feedback-demo":
            return run_feedback_mode(spec)
        return run_sweep_mode(spec)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"decoyqkd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
