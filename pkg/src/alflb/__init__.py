"""Auxiliary-loss-free load balancing for sparse MoE routing: a primal-dual
simulator plus deterministic and stochastic verification labs.
"""

from .core import (
    AffinityMatrix,
    Assignment,
    BiasVector,
    LoadVector,
    ProblemDims,
    RandomSource,
    loads_from_assignment,
    validate_dims,
)
from .balancer import (
    BalancerState,
    ScheduleKind,
    StepSchedule,
    diameter,
    dual_update,
    project_zero_sum,
)
from .router import (
    RawScoreMatrix,
    RoutingOutcome,
    route_topk,
    softmax_affinities,
    switching_set,
)

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix",
    "Assignment",
    "BalancerState",
    "BiasVector",
    "LoadVector",
    "ProblemDims",
    "RandomSource",
    "RawScoreMatrix",
    "RoutingOutcome",
    "ScheduleKind",
    "StepSchedule",
    "diameter",
    "dual_update",
    "loads_from_assignment",
    "project_zero_sum",
    "route_topk",
    "softmax_affinities",
    "switching_set",
    "validate_dims",
]
