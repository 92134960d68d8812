"""Shared domain types: problem dimensions, affinity/bias/assignment containers,
and the deterministic randomness contract used by every other module.

All containers are immutable value objects (frozen dataclasses holding
read-only numpy arrays), so they can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, InvalidRange, NonDivisible

ZERO_SUM_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ProblemDims:
    """Token count T, expert count E and per-token sparsity K."""

    T: int
    E: int
    K: int

    def __post_init__(self):
        if self.T <= 0 or self.E <= 0 or self.K <= 0:
            raise InvalidRange(f"dims must be positive, got {self}")
        if self.E < 2:
            raise InvalidRange(f"need at least 2 experts, got E={self.E}")
        if self.K > self.E:
            raise InvalidRange(f"K={self.K} exceeds E={self.E}")

    @property
    def balanced(self) -> bool:
        return (self.K * self.T) % self.E == 0

    @property
    def L(self) -> int:
        """Perfectly balanced per-expert load K*T/E (balanced mode only)."""
        if not self.balanced:
            raise NonDivisible(
                f"K*T={self.K * self.T} not divisible by E={self.E}"
            )
        return (self.K * self.T) // self.E

    @property
    def target_load(self) -> float:
        """K*T/E as a real number; defined even when not integral."""
        return self.K * self.T / self.E


def validate_dims(dims: ProblemDims, balanced: bool = True) -> ProblemDims:
    """Validate dims, additionally requiring E | K*T when ``balanced``.

    Construction already enforces positivity and K <= E; this re-raises a
    NonDivisible for unbalanced dims when balanced-target mode is requested.
    """
    if balanced and not dims.balanced:
        raise NonDivisible(
            f"K*T={dims.K * dims.T} not divisible by E={dims.E}"
        )
    return dims


@dataclass(frozen=True)
class AffinityMatrix:
    """T x E matrix of normalized affinity scores, every entry in (0, 1)."""

    dims: ProblemDims
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))
        if self.values.shape != (self.dims.T, self.dims.E):
            raise DimMismatch(
                f"affinity shape {self.values.shape} != "
                f"({self.dims.T}, {self.dims.E})"
            )
        if not np.all((self.values > 0.0) & (self.values < 1.0)):
            raise InvalidRange("affinity entries must lie strictly in (0, 1)")


@dataclass(frozen=True)
class BiasVector:
    """Length-E vector of per-expert additive shifts."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))
        if self.values.ndim != 1:
            raise DimMismatch("bias vector must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise InvalidRange("bias entries must be finite")

    @classmethod
    def zeros(cls, E: int) -> "BiasVector":
        return cls(np.zeros(E))

    @property
    def E(self) -> int:
        return self.values.shape[0]

    def is_zero_sum(self, tol: float = ZERO_SUM_TOL) -> bool:
        return abs(float(self.values.sum())) <= tol

    def diameter(self) -> float:
        return float(self.values.max() - self.values.min())


@dataclass(frozen=True)
class Assignment:
    """T x E binary selection matrix with exactly K ones per row."""

    dims: ProblemDims
    selected: np.ndarray

    def __post_init__(self):
        sel = np.array(self.selected, dtype=np.int8, copy=True)
        sel.flags.writeable = False
        object.__setattr__(self, "selected", sel)
        if sel.shape != (self.dims.T, self.dims.E):
            raise DimMismatch(
                f"assignment shape {sel.shape} != ({self.dims.T}, {self.dims.E})"
            )
        if not np.all((sel == 0) | (sel == 1)):
            raise InvalidRange("assignment entries must be 0/1")
        rows = sel.sum(axis=1)
        if not np.all(rows == self.dims.K):
            raise InvalidRange(
                f"every row must select exactly K={self.dims.K} experts"
            )


@dataclass(frozen=True)
class LoadVector:
    """Length-E vector of per-expert token counts."""

    dims: ProblemDims
    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64, copy=True)
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)
        if c.shape != (self.dims.E,):
            raise DimMismatch(f"load shape {c.shape} != ({self.dims.E},)")
        if np.any(c < 0) or np.any(c > self.dims.T):
            raise InvalidRange("loads must lie in [0, T]")
        if int(c.sum()) != self.dims.K * self.dims.T:
            raise InvalidRange(
                f"loads sum to {int(c.sum())}, expected K*T={self.dims.K * self.dims.T}"
            )


def loads_from_assignment(x: Assignment) -> LoadVector:
    """Column sums of the selection matrix."""
    return LoadVector(x.dims, x.selected.sum(axis=0))


@dataclass(frozen=True)
class RandomSource:
    """Seedable randomness handle.

    Identical (seed, stream) pairs reproduce the identical draw sequence.
    Streams keep modules / replicas statistically independent without any
    global state.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.default_rng(ss)

    def substream(self, offset: int) -> "RandomSource":
        return RandomSource(self.seed, self.stream * 100_003 + 1 + offset)
