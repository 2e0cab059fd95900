"""Conflict extraction for factored nonlinear programs.

Library layout:
  graph     -- bipartite variable/constraint data model and subgraph algebra
  solver    -- residuals, Jacobians and augmented-Lagrangian feasibility
  conflicts -- minimal-conflict extractors, labeling, classifier-guided search
  gnn       -- feature encoding, message-passing classifier, training
  domain    -- planar manipulation-keyframe problem generator and datasets
  metrics   -- classifier evaluation and extraction benchmarks
  cli       -- command-line pipeline (gen / label / train / eval / extract / bench)
"""

from .graph import (
    ConstraintNode,
    FactoredNlp,
    GraphError,
    Kind,
    Subgraph,
    VarClass,
    VariableNode,
    connected_components,
    deserialize,
    induced_subgraph,
    is_supergraph,
    serialize,
)
from .solver import (
    Assignment,
    SolverConfig,
    SolveOutcome,
    SolverFailure,
    count_solves,
    jacobian,
    make_solver,
    reset_solve_count,
    residual,
    solve,
)

__all__ = [
    "Assignment",
    "ConstraintNode",
    "FactoredNlp",
    "GraphError",
    "Kind",
    "SolveOutcome",
    "SolverConfig",
    "SolverFailure",
    "Subgraph",
    "VarClass",
    "VariableNode",
    "connected_components",
    "count_solves",
    "deserialize",
    "induced_subgraph",
    "is_supergraph",
    "jacobian",
    "make_solver",
    "reset_solve_count",
    "residual",
    "serialize",
    "solve",
]

__version__ = "0.1.0"
