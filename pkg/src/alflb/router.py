"""Bias-shifted Top-K routing.

Affinities are the row-softmax of raw scores; each token then selects the K
experts with the largest shifted score gamma_ik + p_k.  Ties are broken
deterministically in favor of the lowest expert index and flagged, so
downstream theorem checkers can exclude tie iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AffinityMatrix,
    Assignment,
    BiasVector,
    LoadVector,
    ProblemDims,
    loads_from_assignment,
)
from .errors import DimMismatch, KNotOne, OverflowGuard


@dataclass(frozen=True)
class RawScoreMatrix:
    """T x E matrix of unnormalized (real-valued) router scores."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise DimMismatch("raw scores must be a 2-D matrix")
        if not np.all(np.isfinite(v)):
            raise DimMismatch("raw scores must be finite")


@dataclass(frozen=True)
class RoutingOutcome:
    """Result of one Top-K routing pass.

    assigned_experts[i] lists token i's selected experts in decreasing
    shifted-score order (lowest index first among equals); for K=1 its first
    column is the assignment function alpha(i).
    """

    assignment: Assignment
    loads: LoadVector
    tie_flag: bool
    assigned_experts: np.ndarray  # (T, K) int array
    row_tie: np.ndarray  # (T,) bool, tie at the K-th selection boundary

    def alpha(self) -> np.ndarray:
        """Per-token single assigned expert; K=1 analysis mode only."""
        if self.assignment.dims.K != 1:
            raise KNotOne("alpha() requires K=1")
        return self.assigned_experts[:, 0]


def softmax_affinities(raw: RawScoreMatrix) -> AffinityMatrix:
    """Row-softmax with max-subtraction for numerical stability."""
    v = raw.values
    shifted = v - v.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    if np.any(probs <= 0.0) or np.any(probs >= 1.0):
        raise OverflowGuard(
            "softmax under/overflowed to a degenerate probability; "
            "raw score spread too extreme"
        )
    T, E = v.shape
    return AffinityMatrix(ProblemDims(T=T, E=E, K=1), probs)


def route_topk(gamma: AffinityMatrix, p: BiasVector, K: int) -> RoutingOutcome:
    """Select, per token, the K experts with the largest gamma_ik + p_k.

    Ties at the selection boundary are broken by lowest expert index and
    reported through ``tie_flag`` / ``row_tie``.
    """
    T, E = gamma.values.shape
    if p.E != E:
        raise DimMismatch(f"bias length {p.E} != expert count {E}")
    dims = ProblemDims(T=T, E=E, K=K)

    shifted = gamma.values + p.values[None, :]
    # Stable argsort of the negated scores: descending score, lowest index
    # first among equals.
    order = np.argsort(-shifted, axis=1, kind="stable")
    chosen = order[:, :K]

    if K < E:
        kth = np.take_along_axis(shifted, order[:, K - 1 : K], axis=1)
        nxt = np.take_along_axis(shifted, order[:, K : K + 1], axis=1)
        row_tie = (kth == nxt).ravel()
    else:
        row_tie = np.zeros(T, dtype=bool)

    selected = np.zeros((T, E), dtype=np.int8)
    np.put_along_axis(selected, chosen, 1, axis=1)
    assignment = Assignment(dims, selected)
    return RoutingOutcome(
        assignment=assignment,
        loads=loads_from_assignment(assignment),
        tie_flag=bool(row_tie.any()),
        assigned_experts=chosen,
        row_tie=row_tie,
    )


def switching_set(prev: RoutingOutcome, next: RoutingOutcome) -> np.ndarray:
    """Indices of tokens whose assigned expert changed (K=1 mode)."""
    if prev.assignment.dims != next.assignment.dims:
        raise DimMismatch("outcomes have different dims")
    a0 = prev.alpha()
    a1 = next.alpha()
    return np.flatnonzero(a0 != a1)
