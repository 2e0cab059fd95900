"""Minimal-conflict extraction for factored nonlinear programs.

A conflict is an infeasible variable-induced subgraph; a minimal conflict
stays infeasible while every single-variable removal is feasible.  This
module provides a brute-force enumerator (test oracle), deletion filtering,
QuickXplain over variables, a temporal-prefix heuristic, ground-truth
labeling, and the classifier-guided extraction loop.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .graph import (
    FactoredNlp,
    GraphError,
    Subgraph,
    as_subgraph,
    connected_components,
    induced_subgraph,
)
from .solver import SolveFn, SolveOutcome


class ConflictError(ValueError):
    """Raised when an extractor precondition is violated (e.g. feasible input)."""


@dataclass(frozen=True)
class Conflict:
    """An infeasible variable-induced subgraph with a minimality certificate."""

    sub: Subgraph
    minimal: bool

    @property
    def variable_ids(self) -> frozenset[int]:
        return self.sub.variable_ids


ReduceFn = Callable[[Subgraph], Conflict]


@dataclass
class LabeledInstance:
    """A graph with per-variable feasibility labels and the conflicts behind them.

    labels[i] == 0 exactly when variable i appears in some stored conflict.
    """

    graph: FactoredNlp
    labels: list[int]
    conflicts: list[Conflict]

    def conflict_sets(self) -> list[frozenset[int]]:
        return [c.variable_ids for c in self.conflicts]

    def check(self) -> None:
        union: set[int] = set()
        for c in self.conflicts:
            union |= c.variable_ids
        expect = [0 if i in union else 1 for i in range(self.graph.n_variables)]
        if expect != list(self.labels):
            raise ConflictError("labels do not match stored conflict membership")


def _sorted_conflicts(conflicts: Iterable[Conflict]) -> list[Conflict]:
    return sorted(
        conflicts,
        key=lambda c: (min(c.variable_ids), len(c.variable_ids), tuple(sorted(c.variable_ids))),
    )


def _is_connected(sub: Subgraph) -> bool:
    if len(sub.variable_ids) <= 1:
        return True
    return len(connected_components(sub)) == 1


def brute_force_conflicts(graph: FactoredNlp, solve: SolveFn, max_vars: int = 14) -> list[Conflict]:
    """All minimal conflicts, by enumerating variable subsets of increasing size.

    Exponential; guarded to at most max_vars variables.  Supersets of found
    conflicts are pruned, as are disconnected candidates (a minimal conflict
    is always connected) and candidates without any constraint.
    """
    from itertools import combinations

    graph.freeze()
    n = graph.n_variables
    if n > max_vars:
        raise ConflictError(f"brute force enumeration guarded to {max_vars} variables, graph has {n}")
    ids = list(range(n))
    found: list[frozenset[int]] = []
    out: list[Conflict] = []
    for size in range(1, n + 1):
        for combo in combinations(ids, size):
            cand = frozenset(combo)
            if any(f <= cand for f in found):
                continue
            sub = induced_subgraph(graph, cand)
            if not sub.constraint_ids:
                continue
            if not _is_connected(sub):
                continue
            if not solve(sub).feasible:
                found.append(cand)
                out.append(Conflict(sub, minimal=True))
    return _sorted_conflicts(out)


def deletion_filter(sub: Subgraph | FactoredNlp, solve: SolveFn) -> Conflict:
    """Minimal conflict by one removal test per variable (General 1).

    Exactly one solve to verify the input plus one solve per variable:
    iterate the input's variables in ascending id order, tentatively drop
    each, and keep the drop iff the induced subgraph stays infeasible.
    """
    sub = as_subgraph(sub)
    if solve(sub).feasible:
        raise ConflictError("deletion_filter requires an infeasible input")
    current = set(sub.variable_ids)
    for x in sorted(sub.variable_ids):
        trial = induced_subgraph(sub.parent, current - {x})
        if not solve(trial).feasible:
            current.discard(x)
    return Conflict(induced_subgraph(sub.parent, current), minimal=True)


def quickxplain(sub: Subgraph | FactoredNlp, solve: SolveFn) -> Conflict:
    """Minimal conflict by preferred-variable divide and conquer (General 2).

    Operates on variables with variable-induced closure at every feasibility
    test, so the output is itself variable-induced.  Preference order is
    ascending variable id.  Needs fewer solves than deletion filtering when
    the conflict is much smaller than the input.
    """
    sub = as_subgraph(sub)
    if solve(sub).feasible:
        raise ConflictError("quickxplain requires an infeasible input")
    parent = sub.parent

    def infeasible(vids: Sequence[int]) -> bool:
        return not solve(induced_subgraph(parent, vids)).feasible

    def recurse(background: list[int], delta: list[int], candidates: list[int]) -> list[int]:
        if delta and infeasible(background):
            return []
        if len(candidates) == 1:
            return list(candidates)
        half = len(candidates) // 2
        first, second = candidates[:half], candidates[half:]
        d2 = recurse(background + first, first, second)
        d1 = recurse(background + d2, d2, first)
        return d1 + d2

    core = recurse([], [], sorted(sub.variable_ids))
    return Conflict(induced_subgraph(parent, core), minimal=True)


def check_minimal(conf: Conflict, solve: SolveFn) -> bool:
    """True iff the conflict is infeasible and every one-variable removal is feasible."""
    if solve(conf.sub).feasible:
        return False
    for x in sorted(conf.variable_ids):
        rest = induced_subgraph(conf.sub.parent, conf.variable_ids - {x})
        if not solve(rest).feasible:
            return False
    return True


def expert_prefix(sub: Subgraph | FactoredNlp, solve: SolveFn, reduce: ReduceFn) -> Conflict:
    """Scan growing time-prefix subgraphs and reduce the first infeasible one.

    Solves many small feasible problems before hitting the conflict, which is
    cheap compared with reducing the whole graph when the conflict sits at an
    early keyframe.
    """
    sub = as_subgraph(sub)
    parent = sub.parent
    times = sorted({parent.variables[i].time_index for i in sub.variable_ids})
    for t in times:
        prefix_ids = frozenset(i for i in sub.variable_ids if parent.variables[i].time_index <= t)
        prefix = induced_subgraph(parent, prefix_ids)
        if not solve(prefix).feasible:
            return reduce(prefix)
    if times and frozenset(
        i for i in sub.variable_ids if parent.variables[i].time_index <= times[-1]
    ) != sub.variable_ids:
        # defensive: time indices did not cover the subgraph
        if not solve(sub).feasible:
            return reduce(sub)
    raise ConflictError("expert_prefix requires an infeasible input (all prefixes were feasible)")


def label_variables(
    graph: FactoredNlp,
    solve: SolveFn,
    reduce: ReduceFn,
    max_conflicts: int = 10,
) -> LabeledInstance:
    """Ground-truth labels from repeated conflict extraction.

    Enumerates conflicts by re-running extraction on the graph minus one
    variable of each found conflict, rotating the excluded variable over the
    conflict members (breadth-first over exclusion sets).  Stops after
    max_conflicts distinct conflicts or when the exclusion frontier is
    exhausted; the enumeration is approximate, not complete.
    """
    graph.freeze()
    all_vars = graph.all_variable_ids()
    conflicts: list[Conflict] = []
    found_sets: list[frozenset[int]] = []
    queue: deque[frozenset[int]] = deque([frozenset()])
    seen: set[frozenset[int]] = {frozenset()}
    budget = 10 * max_conflicts
    pops = 0
    while queue and len(conflicts) < max_conflicts and pops < budget:
        excl = queue.popleft()
        pops += 1
        candidate = all_vars - excl
        blocker = next((f for f in found_sets if f <= candidate), None)
        if blocker is not None:
            # already contains a known conflict: branch around it without solving
            for v in sorted(blocker):
                nxt = excl | {v}
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
            continue
        sub = induced_subgraph(graph, candidate)
        if solve(sub).feasible:
            continue
        conf = reduce(sub)
        key = conf.variable_ids
        if key not in found_sets:
            found_sets.append(key)
            conflicts.append(conf)
        for v in sorted(key):
            nxt = excl | {v}
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    conflicts = _sorted_conflicts(conflicts)
    union: set[int] = set()
    for c in conflicts:
        union |= c.variable_ids
    labels = [0 if i in union else 1 for i in range(graph.n_variables)]
    instance = LabeledInstance(graph, labels, conflicts)
    instance.check()
    return instance


def gnn_extract(
    graph: FactoredNlp,
    model,
    solve: SolveFn,
    reduce: ReduceFn,
    delta0: float = 0.5,
    delta_rate: float = 1.2,
    find_all: bool = False,
    scores: Sequence[float] | None = None,
    delta_cap: float = 1.5,
) -> list[Conflict]:
    """Classifier-guided conflict extraction.

    Scores every variable once, then raises the threshold delta and tests the
    connected components of the subgraph induced by variables scoring below
    it; the first infeasible component is reduced to a minimal conflict.
    With find_all=True the loop keeps going, skipping any candidate that is a
    supergraph of an already-found conflict.  Once delta exceeds 1 every
    variable is a candidate, so a feasible graph terminates with no conflict
    after a single full-graph check (candidate sets are never solved twice).
    """
    graph.freeze()
    if scores is None:
        from .gnn import forward

        score_arr = forward(model, graph)
    else:
        score_arr = np.asarray(scores, dtype=float)
    if score_arr.shape[0] != graph.n_variables:
        raise ConflictError(
            f"got {score_arr.shape[0]} scores for {graph.n_variables} variables"
        )
    found: list[Conflict] = []
    found_sets: list[frozenset[int]] = []
    solved: dict[frozenset[int], bool] = {}
    delta = delta0
    while delta <= delta_cap:
        cand_ids = frozenset(int(i) for i in np.flatnonzero(score_arr < delta))
        for piece in connected_components(induced_subgraph(graph, cand_ids)):
            key = piece.variable_ids
            if find_all and any(f <= key for f in found_sets):
                continue
            if key in solved:
                feasible = solved[key]
            else:
                feasible = solve(piece).feasible
                solved[key] = feasible
            if feasible:
                continue
            conf = reduce(piece)
            found.append(conf)
            found_sets.append(conf.variable_ids)
            if not find_all:
                return found
        delta *= delta_rate
    return found
