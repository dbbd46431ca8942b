"""Small Dempster-Shafer and fuzzy-membership toolkit.

Focal sets are integer bitmasks over a sample space of ``space_size``
elements: bit ``i`` set means element ``i`` belongs to the set. The full
set (frame of discernment) is ``(1 << space_size) - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

MAX_SPACE_SIZE = 16
NORMALIZATION_EPS = 1e-9


class EvidenceError(ValueError):
    pass


class SpaceMismatch(EvidenceError):
    pass


class TotalConflict(EvidenceError):
    pass


class NotNormalized(EvidenceError):
    pass


class NonPositiveSigma(EvidenceError):
    pass


def cardinality(bits: int) -> int:
    return bin(bits).count("1")


def focal_set(space_size: int, *elements: int) -> int:
    """Bitmask for the set containing ``elements`` (0-based indices)."""
    bits = 0
    for e in elements:
        if not 0 <= e < space_size:
            raise EvidenceError(f"element {e} outside sample space of size {space_size}")
        bits |= 1 << e
    return bits


@dataclass(frozen=True)
class MassFunction:
    """Nonnegative masses over focal sets. Normalization is not required."""

    space_size: int
    masses: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.space_size <= MAX_SPACE_SIZE:
            raise EvidenceError(f"space_size must be in [1, {MAX_SPACE_SIZE}], got {self.space_size}")
        full = (1 << self.space_size) - 1
        clean = {}
        for bits, m in self.masses.items():
            bits = int(bits)
            m = float(m)
            if not 0 <= bits <= full:
                raise EvidenceError(f"focal set {bits:#b} exceeds sample space of size {self.space_size}")
            if not (m >= 0.0 and math.isfinite(m)):
                raise EvidenceError(f"mass must be finite and nonnegative, got {m}")
            if bits == 0 and m != 0.0:
                raise EvidenceError("the empty set cannot carry mass")
            if m > 0.0:
                clean[bits] = m
        object.__setattr__(self, "masses", clean)

    @property
    def omega(self) -> int:
        return (1 << self.space_size) - 1

    @classmethod
    def vacuous(cls, space_size: int) -> "MassFunction":
        return cls(space_size, {(1 << space_size) - 1: 1.0})

    @classmethod
    def from_dense(cls, vector) -> "MassFunction":
        """Build from a length-2^n vector indexed by bitmask."""
        vector = np.asarray(vector, dtype=float)
        n = int(round(math.log2(vector.size)))
        if 1 << n != vector.size:
            raise EvidenceError("dense mass vector length must be a power of two")
        return cls(n, {i: v for i, v in enumerate(vector) if v != 0.0})

    def to_dense(self) -> np.ndarray:
        out = np.zeros(1 << self.space_size)
        for bits, m in self.masses.items():
            out[bits] = m
        return out

    def total(self) -> float:
        return math.fsum(self.masses.values())

    def is_normalized(self, eps: float = NORMALIZATION_EPS) -> bool:
        return abs(self.total() - 1.0) <= eps

    def __getitem__(self, bits: int) -> float:
        return self.masses.get(bits, 0.0)


def dsr_combine(m1: MassFunction, m2: MassFunction) -> MassFunction:
    """Dempster's rule: conjunctive combination, conflict normalized away.

    Inputs need not sum to one; the result always does.
    """
    if m1.space_size != m2.space_size:
        raise SpaceMismatch(f"sample spaces differ: {m1.space_size} vs {m2.space_size}")
    if not m1.masses or not m2.masses:
        raise EvidenceError("both mass functions need at least one nonzero mass")
    combined: dict[int, list[float]] = {}
    for b, mb in m1.masses.items():
        for c, mc in m2.masses.items():
            a = b & c
            if a:
                combined.setdefault(a, []).append(mb * mc)
    sums = {a: math.fsum(terms) for a, terms in combined.items()}
    norm = math.fsum(sums.values())
    if norm <= 0.0:
        raise TotalConflict("all combined mass falls on the empty set")
    return MassFunction(m1.space_size, {a: s / norm for a, s in sums.items()})


def pignistic(m: MassFunction) -> np.ndarray:
    """Split each focal set's mass evenly among its members."""
    if not m.is_normalized():
        raise NotNormalized(f"masses sum to {m.total()!r}, expected 1")
    p = np.zeros(m.space_size)
    for bits, mass in m.masses.items():
        share = mass / cardinality(bits)
        for i in range(m.space_size):
            if bits >> i & 1:
                p[i] += share
    return p


def triangular_membership(x, w, b):
    """Linear membership ``w*x + b``; deliberately unclamped."""
    return w * x + b


def gaussian_membership(x, mu, sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    return np.exp(-((x - mu) ** 2) / (2.0 * sigma**2)) / np.sqrt(2.0 * np.pi * sigma**2)
