"""Finite-key decoy-state BB84 with three prepared states: key-rate
estimation, a simulated physical layer and a complete two-party session."""

from .config import ConfigError, ProtocolConfig, load_config, validate_config
from .channel import ChannelModel, DetectorModel, DriftModel, analytic_rates, simulate_block
from .estimation import ObservedCounts, estimate
from .security import EpsilonBudget, SecurityBounds, secret_key_length
from .protocol import Physics, SessionOptions, run_session
from .experiments import PRESETS, ExperimentSpec, run_operating_point, run_sweep

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ProtocolConfig",
    "load_config",
    "validate_config",
    "ChannelModel",
    "DetectorModel",
    "DriftModel",
    "analytic_rates",
    "simulate_block",
    "ObservedCounts",
    "estimate",
    "EpsilonBudget",
    "SecurityBounds",
    "secret_key_length",
    "Physics",
    "SessionOptions",
    "run_session",
    "PRESETS",
    "ExperimentSpec",
    "run_operating_point",
    "run_sweep",
]
