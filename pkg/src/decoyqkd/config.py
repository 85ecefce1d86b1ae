"""Protocol configuration: constants shared by Alice and Bob, plus JSON I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

__all__ = [
    "ConfigError",
    "ProtocolConfig",
    "validate_config",
    "config_to_json",
    "config_from_json",
    "load_config",
]

_SUM_TOL = 1e-12


class ConfigError(ValueError):
    """Raised when a configuration is rejected; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ProtocolConfig:
    """All protocol constants.

    Defaults are the local field-test settings: three intensities
    (0.12, 0.012, 0.003) drawn with probabilities (2/3, 2/9, 1/9), Alice in Z
    with probability 15/16, Bob in Z with probability 1/2, a 625 MHz clock and
    2.81e11 pulses (450 s of collection).
    """

    clock_rate: float = 625e6
    n_pulses: int = 281_000_000_000
    intensities: tuple = (0.12, 0.012, 0.003)
    intensity_probs: tuple = (2 / 3, 2 / 9, 1 / 9)
    alice_basis_probs: tuple = (15 / 16, 1 / 16)
    bob_basis_probs: tuple = (1 / 2, 1 / 2)
    eps_sec: float = 1e-10
    eps_cor: float = 1e-10
    xi: float = 1.15
    e_phase_tol: float = 0.25

    def __post_init__(self):
        # JSON gives lists; keep tuples so the dataclass stays hashable.
        for name in ("intensities", "intensity_probs", "alice_basis_probs", "bob_basis_probs"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "n_pulses", int(self.n_pulses))

    @property
    def duration(self) -> float:
        """Collection time in seconds."""
        return self.n_pulses / self.clock_rate

    @property
    def p_z_alice(self) -> float:
        return self.alice_basis_probs[0]

    @property
    def p_z_bob(self) -> float:
        return self.bob_basis_probs[0]

    def with_(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)


def _check_probs(name, values, expected_len, errors):
    if len(values) != expected_len:
        errors.append(f"{name} must have {expected_len} entries")
        return
    if any(not (0.0 <= v <= 1.0) or math.isnan(v) for v in values):
        errors.append(f"{name} entries must lie in [0, 1]")
    if abs(sum(values) - 1.0) > _SUM_TOL:
        errors.append(f"{name} must sum to 1")


def validate_config(cfg: ProtocolConfig) -> list[str]:
    """Every violated constraint of ``cfg``; an empty list means the config is valid."""
    errors: list[str] = []
    if not cfg.clock_rate > 0:
        errors.append("clock_rate must be positive")
    if cfg.n_pulses < 1:
        errors.append("n_pulses must be at least 1")
    if len(cfg.intensities) != 3:
        errors.append("intensities must have 3 entries")
    else:
        mu1, mu2, mu3 = cfg.intensities
        if not mu1 > mu2 + mu3:
            errors.append("μ1 > μ2 + μ3 violated")
        if not mu2 > mu3:
            errors.append("μ2 > μ3 violated")
        if not mu3 >= 0:
            errors.append("μ3 ≥ 0 violated")
    _check_probs("intensity_probs", cfg.intensity_probs, 3, errors)
    _check_probs("alice_basis_probs", cfg.alice_basis_probs, 2, errors)
    _check_probs("bob_basis_probs", cfg.bob_basis_probs, 2, errors)
    for name in ("eps_sec", "eps_cor"):
        v = getattr(cfg, name)
        if not 0.0 < v < 1.0:
            errors.append(f"{name} must lie in (0, 1)")
    if not cfg.xi >= 1.0:
        errors.append("xi must be at least 1")
    if not 0.0 <= cfg.e_phase_tol <= 0.5:
        errors.append("e_phase_tol must lie in [0, 0.5]")
    return errors


def require_valid(cfg: ProtocolConfig) -> ProtocolConfig:
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def config_to_json(cfg: ProtocolConfig) -> str:
    data = asdict(cfg)
    for k, v in data.items():
        if isinstance(v, tuple):
            data[k] = list(v)
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def config_from_json(text: str) -> ProtocolConfig:
    """Parse a config document; unknown keys and invalid values raise ConfigError."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"not valid JSON: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["config document must be a JSON object"])
    known = {f.name for f in fields(ProtocolConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError([f"unknown key: {k}" for k in unknown])
    try:
        cfg = ProtocolConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError([str(exc)]) from None
    return require_valid(cfg)


def load_config(path) -> ProtocolConfig:
    return config_from_json(Path(path).read_text(encoding="utf-8"))
