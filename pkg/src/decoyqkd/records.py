"""Per-pulse records, set classification (sifting) and the sifted-set accumulator.

Records are stored column-wise (one numpy array per field) so that tens of
millions of pulses fit in memory. ``TrialRecord`` is the row view used at API
boundaries and in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Z",
    "X",
    "NONE",
    "DOUBLE",
    "DISCARD",
    "KEY",
    "CHECK",
    "MISMATCH",
    "TrialRecord",
    "Records",
    "SetLabel",
    "classify_record",
    "classify_arrays",
    "SiftedSets",
]

# bases
Z, X = 0, 1
# Bob outcomes besides the bit values 0 and 1
NONE, DOUBLE = 2, 3
# set kinds
DISCARD, KEY, CHECK, MISMATCH = 0, 1, 2, 3

_KIND_NAMES = {DISCARD: "discard", KEY: "key", CHECK: "check", MISMATCH: "mismatch"}


@dataclass(frozen=True)
class TrialRecord:
    """One clock cycle.

    ``intensity_label`` is the index 0, 1, 2 of (μ1, μ2, μ3). ``bob_outcome`` is
    0, 1, ``NONE`` or ``DOUBLE``; ``resolved_bit`` carries Bob's bit after a
    double click has been assigned a random value.
    """

    index: int
    alice_basis: int
    alice_bit: int
    intensity_label: int
    bob_basis: int
    bob_outcome: int
    resolved_bit: Optional[int] = None

    def __post_init__(self):
        if self.alice_basis == X and self.alice_bit != 0:
            raise ValueError("only |0_x> is prepared in the X basis")
        if self.bob_outcome in (0, 1):
            if self.resolved_bit is None:
                object.__setattr__(self, "resolved_bit", self.bob_outcome)
            elif self.resolved_bit != self.bob_outcome:
                raise ValueError("resolved_bit must equal a single-click outcome")
        elif self.bob_outcome == DOUBLE:
            if self.resolved_bit not in (0, 1):
                raise ValueError("a double click needs a resolved bit")
        elif self.bob_outcome == NONE:
            if self.resolved_bit is not None:
                raise ValueError("no detection cannot carry a bit")
        else:
            raise ValueError(f"bad outcome {self.bob_outcome}")


@dataclass(frozen=True)
class SetLabel:
    kind: int
    intensity: Optional[int] = None
    alice_bit: Optional[int] = None
    bob_bit: Optional[int] = None

    def __str__(self):
        name = _KIND_NAMES[self.kind]
        if self.kind == DISCARD:
            return name
        if self.kind == MISMATCH:
            return f"{name}({self.alice_bit},{self.bob_bit},μ{self.intensity + 1})"
        return f"{name}(μ{self.intensity + 1})"


def classify_record(r: TrialRecord) -> SetLabel:
    """Sifting-set membership of one record.

    The a=X, b=Z combination has no set and is discarded, as are all pulses
    without a detection.
    """
    if r.bob_outcome == NONE:
        return SetLabel(DISCARD)
    if r.alice_basis == Z and r.bob_basis == Z:
        return SetLabel(KEY, r.intensity_label)
    if r.alice_basis == X and r.bob_basis == X:
        return SetLabel(CHECK, r.intensity_label)
    if r.alice_basis == Z and r.bob_basis == X:
        return SetLabel(MISMATCH, r.intensity_label, r.alice_bit, r.resolved_bit)
    return SetLabel(DISCARD)


@dataclass
class Records:
    """Column-wise record block. ``resolved`` is -1 where Bob saw nothing."""

    index: np.ndarray
    alice_basis: np.ndarray
    alice_bit: np.ndarray
    intensity: np.ndarray
    bob_basis: np.ndarray
    outcome: np.ndarray
    resolved: np.ndarray

    def __len__(self):
        return len(self.index)

    def row(self, i: int) -> TrialRecord:
        res = int(self.resolved[i])
        return TrialRecord(
            index=int(self.index[i]),
            alice_basis=int(self.alice_basis[i]),
            alice_bit=int(self.alice_bit[i]),
            intensity_label=int(self.intensity[i]),
            bob_basis=int(self.bob_basis[i]),
            bob_outcome=int(self.outcome[i]),
            resolved_bit=None if res < 0 else res,
        )

    def __iter__(self):
        return (self.row(i) for i in range(len(self)))

    def take(self, mask) -> "Records":
        return Records(*(getattr(self, f)[mask] for f in self._fields()))

    @staticmethod
    def _fields():
        return ("index", "alice_basis", "alice_bit", "intensity", "bob_basis", "outcome", "resolved")

    @classmethod
    def from_rows(cls, rows) -> "Records":
        rows = list(rows)
        cols = {
            "index": np.array([r.index for r in rows], dtype=np.int64),
            "alice_basis": np.array([r.alice_basis for r in rows], dtype=np.uint8),
            "alice_bit": np.array([r.alice_bit for r in rows], dtype=np.uint8),
            "intensity": np.array([r.intensity_label for r in rows], dtype=np.uint8),
            "bob_basis": np.array([r.bob_basis for r in rows], dtype=np.uint8),
            "outcome": np.array([r.bob_outcome for r in rows], dtype=np.uint8),
            "resolved": np.array([-1 if r.resolved_bit is None else r.resolved_bit for r in rows], dtype=np.int8),
        }
        return cls(**cols)

    @classmethod
    def concat(cls, blocks) -> "Records":
        blocks = list(blocks)
        return cls(*(np.concatenate([getattr(b, f) for b in blocks]) for f in cls._fields()))


def classify_arrays(rec: Records) -> np.ndarray:
    """Vectorised ``classify_record``: the set kind of every record."""
    detected = rec.outcome != NONE
    kinds = np.full(len(rec), DISCARD, dtype=np.uint8)
    a, b = rec.alice_basis, rec.bob_basis
    kinds[detected & (a == Z) & (b == Z)] = KEY
    kinds[detected & (a == X) & (b == X)] = CHECK
    kinds[detected & (a == Z) & (b == X)] = MISMATCH
    return kinds


@dataclass
class SiftedSets:
    """Sifted-set accumulator.

    ``z_sets[k]`` / ``x_sets[k]`` hold record indices of the key and
    security-check sets for intensity k; ``mismatch_counts[j, k, mu]`` counts
    a=Z, b=X detections with Alice bit j and Bob bit k. Partial instances built
    from disjoint pulse blocks combine with :meth:`merge`.
    """

    z_sets: list = field(default_factory=lambda: [np.empty(0, np.int64) for _ in range(3)])
    x_sets: list = field(default_factory=lambda: [np.empty(0, np.int64) for _ in range(3)])
    mismatch_counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 3), dtype=np.int64))
    z_error_counts: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    x_error_counts: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    @classmethod
    def from_records(cls, rec: Records) -> "SiftedSets":
        kinds = classify_arrays(rec)
        out = cls()
        for mu in range(3):
            at_mu = rec.intensity == mu
            zmask = (kinds == KEY) & at_mu
            xmask = (kinds == CHECK) & at_mu
            out.z_sets[mu] = rec.index[zmask]
            out.x_sets[mu] = rec.index[xmask]
            out.z_error_counts[mu] = np.count_nonzero(rec.resolved[zmask] != rec.alice_bit[zmask])
            out.x_error_counts[mu] = np.count_nonzero(rec.resolved[xmask] == 1)
            mm = (kinds == MISMATCH) & at_mu
            for j in (0, 1):
                for k in (0, 1):
                    out.mismatch_counts[j, k, mu] = np.count_nonzero(
                        mm & (rec.alice_bit == j) & (rec.resolved == k)
                    )
        return out

    def merge(self, other: "SiftedSets") -> "SiftedSets":
        def union(a, b):
            return np.union1d(a, b) if len(a) and len(b) else np.concatenate([a, b])

        return SiftedSets(
            z_sets=[union(a, b) for a, b in zip(self.z_sets, other.z_sets)],
            x_sets=[union(a, b) for a, b in zip(self.x_sets, other.x_sets)],
            mismatch_counts=self.mismatch_counts + other.mismatch_counts,
            z_error_counts=self.z_error_counts + other.z_error_counts,
            x_error_counts=self.x_error_counts + other.x_error_counts,
        )

    @property
    def z_sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.z_sets], dtype=np.int64)

    @property
    def x_sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.x_sets], dtype=np.int64)

    def key_indices(self) -> np.ndarray:
        """Sorted indices of ∪_μ Z_μ."""
        return np.sort(np.concatenate(self.z_sets))

    def __eq__(self, other):
        if not isinstance(other, SiftedSets):
            return NotImplemented
        return (
            all(np.array_equal(np.sort(a), np.sort(b)) for a, b in zip(self.z_sets, other.z_sets))
            and all(np.array_equal(np.sort(a), np.sort(b)) for a, b in zip(self.x_sets, other.x_sets))
            and np.array_equal(self.mismatch_counts, other.mismatch_counts)
            and np.array_equal(self.z_error_counts, other.z_error_counts)
            and np.array_equal(self.x_error_counts, other.x_error_counts)
        )
