"""Bipartite variable/constraint graph model for factored nonlinear programs.

A graph holds typed continuous variables and typed constraints; each
constraint touches an ordered subset of variables (its scope).  Subgraphs are
always variable-induced: a set of variables plus every constraint whose full
scope lies inside that set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence


class GraphError(ValueError):
    """Invalid graph construction or query."""


class VarClass(Enum):
    ROBOT = "robot-config"
    OBJ_ABS = "object-absolute-pose"
    OBJ_REL = "object-relative-pose"


# Continuous geometry attached to each variable class:
#   ROBOT:   (base_x, base_y, base_theta, reach_radius)
#   OBJ_ABS: (half_extent,)
#   OBJ_REL: (ref_x, ref_y)  -- the start pose of the object
GEOMETRY_ARITY = {
    VarClass.ROBOT: 4,
    VarClass.OBJ_ABS: 1,
    VarClass.OBJ_REL: 2,
}


class Kind(Enum):
    REF = "Ref"
    EQUAL = "Equal"
    POSE_DIFF = "PoseDiff"
    KIN = "Kin"
    GRASP = "Grasp"
    POS = "Pos"
    COLLISION = "Collision"
    LINEAR_INEQ = "LinearIneq"


#: Kinds whose residual rows are all equalities.
EQUALITY_KINDS = {Kind.REF, Kind.EQUAL, Kind.POSE_DIFF, Kind.KIN, Kind.GRASP}

#: Region modes for Pos constraints.
POS_BOX = 0.0
POS_DISC = 1.0


@dataclass(frozen=True)
class VariableNode:
    """A continuous variable x_i in R^dim."""

    id: int
    dim: int
    class_tag: VarClass
    time_index: int
    geometry: tuple[float, ...]


@dataclass(frozen=True)
class ConstraintNode:
    """A differentiable constraint over an ordered scope of variables."""

    id: int
    kind: Kind
    scope: tuple[int, ...]
    params: tuple[float, ...]
    residual_dim: int
    is_equality: bool


def _check_finite(values: Iterable[float], what: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if any(not math.isfinite(v) for v in out):
        raise GraphError(f"{what} must be finite, got {out}")
    return out


def constraint_signature(kind: Kind, scope_dims: Sequence[int], params: Sequence[float]) -> tuple[int, bool]:
    """Validate (kind, scope, params) and return (residual_dim, is_equality).

    Raises GraphError for arity mismatches; this is the single place that
    declares the per-kind scope/params contracts used by both the graph
    builder and the residual evaluator.
    """
    n = len(scope_dims)
    p = list(params)
    if kind is Kind.REF:
        if n != 1:
            raise GraphError(f"Ref takes exactly one variable, got scope of {n}")
        if len(p) != scope_dims[0]:
            raise GraphError(f"Ref target length {len(p)} != variable dim {scope_dims[0]}")
        return scope_dims[0], True
    if kind is Kind.EQUAL:
        if n != 2 or scope_dims[0] != scope_dims[1]:
            raise GraphError(f"Equal takes two variables of equal dim, got dims {tuple(scope_dims)}")
        if p:
            raise GraphError("Equal takes no params")
        return scope_dims[0], True
    if kind is Kind.POSE_DIFF:
        if n == 2:
            if len(p) != 2:
                raise GraphError("PoseDiff over (abs, rel) needs a fixed parent origin (ox, oy)")
        elif n == 3:
            if p:
                raise GraphError("PoseDiff over (abs, rel, parent) takes no params")
        else:
            raise GraphError(f"PoseDiff takes 2 or 3 variables, got {n}")
        if any(d != 2 for d in scope_dims):
            raise GraphError("PoseDiff requires dim-2 variables")
        return 2, True
    if kind is Kind.KIN:
        # scope = (rel_prev) + [old_parent] + (rel_new) + [new_parent]
        # params = (has_old_parent, has_new_parent, old_ox, old_oy, new_ox, new_oy)
        if len(p) != 6:
            raise GraphError("Kin needs params (has_old, has_new, old_ox, old_oy, new_ox, new_oy)")
        has_old, has_new = int(p[0]), int(p[1])
        if has_old not in (0, 1) or has_new not in (0, 1):
            raise GraphError("Kin parent flags must be 0 or 1")
        expect = 2 + has_old + has_new
        if n != expect or expect < 3:
            raise GraphError(
                f"Kin scope must hold previous/new relative poses plus {has_old + has_new} "
                f"parent variable(s); expected {max(expect, 3)} variables, got {n}"
            )
        if any(d != 2 for d in scope_dims):
            raise GraphError("Kin requires dim-2 variables")
        return 2, True
    if kind is Kind.GRASP:
        if n != 1:
            raise GraphError(f"Grasp takes exactly one variable, got scope of {n}")
        if len(p) != scope_dims[0]:
            raise GraphError(f"Grasp offset length {len(p)} != variable dim {scope_dims[0]}")
        return scope_dims[0], True
    if kind is Kind.POS:
        if n != 1 or scope_dims[0] != 2:
            raise GraphError("Pos takes exactly one dim-2 variable")
        if not p:
            raise GraphError("Pos needs a region mode parameter")
        if p[0] == POS_BOX:
            if len(p) != 5:
                raise GraphError("Pos box needs params (mode, cx, cy, ex, ey)")
            return 4, False
        if p[0] == POS_DISC:
            if len(p) != 4:
                raise GraphError("Pos disc needs params (mode, cx, cy, radius)")
            return 1, False
        raise GraphError(f"unknown Pos region mode {p[0]}")
    if kind is Kind.COLLISION:
        if n != 2 or any(d != 2 for d in scope_dims):
            raise GraphError("Collision takes two dim-2 variables")
        if len(p) != 3:
            raise GraphError("Collision needs params (radius_a, radius_b, clearance)")
        return 1, False
    if kind is Kind.LINEAR_INEQ:
        # params = (m, row-major A of shape m x total_dim, b of length m)
        total = sum(scope_dims)
        if not p:
            raise GraphError("LinearIneq needs params (m, A..., b...)")
        m = int(p[0])
        if m < 1 or len(p) != 1 + m * total + m:
            raise GraphError(
                f"LinearIneq params must hold m={m} rows of A ({total} cols) plus b, got {len(p)} values"
            )
        return m, False
    raise GraphError(f"unknown constraint kind {kind!r}")


class FactoredNlp:
    """Bipartite graph of variables and constraints.

    Built incrementally with add_variable / add_constraint, then frozen.
    Frozen graphs are immutable and safe to share across threads.
    """

    def __init__(self) -> None:
        self.variables: list[VariableNode] = []
        self.constraints: list[ConstraintNode] = []
        self._frozen = False
        self._var_cons: list[tuple[int, ...]] | None = None

    # -- construction -------------------------------------------------------

    def add_variable(
        self,
        dim: int,
        class_tag: VarClass,
        time_index: int = 0,
        geometry: Sequence[float] = (),
    ) -> int:
        if self._frozen:
            raise GraphError("graph is frozen")
        if dim < 1:
            raise GraphError(f"variable dim must be >= 1, got {dim}")
        if time_index < 0:
            raise GraphError(f"time_index must be >= 0, got {time_index}")
        geom = _check_finite(geometry, "geometry")
        want = GEOMETRY_ARITY[class_tag]
        if len(geom) != want:
            raise GraphError(
                f"class {class_tag.value} declares geometry arity {want}, got {len(geom)}"
            )
        vid = len(self.variables)
        self.variables.append(VariableNode(vid, dim, class_tag, time_index, geom))
        return vid

    def add_constraint(self, kind: Kind, scope: Sequence[int], params: Sequence[float] = ()) -> int:
        if self._frozen:
            raise GraphError("graph is frozen")
        scope_t = tuple(int(i) for i in scope)
        if not scope_t:
            raise GraphError("constraint scope is empty")
        if len(set(scope_t)) != len(scope_t):
            raise GraphError(f"constraint scope has duplicates: {scope_t}")
        for i in scope_t:
            if not 0 <= i < len(self.variables):
                raise GraphError(f"scope references unknown variable id {i}")
        par = _check_finite(params, "params")
        dims = [self.variables[i].dim for i in scope_t]
        rdim, is_eq = constraint_signature(kind, dims, par)
        cid = len(self.constraints)
        self.constraints.append(ConstraintNode(cid, kind, scope_t, par, rdim, is_eq))
        return cid

    def freeze(self) -> "FactoredNlp":
        if not self._frozen:
            per_var: list[list[int]] = [[] for _ in self.variables]
            for con in self.constraints:
                for i in con.scope:
                    per_var[i].append(con.id)
            self._var_cons = [tuple(cs) for cs in per_var]
            self._frozen = True
        return self

    # -- queries ------------------------------------------------------------

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    def constraints_of(self, var_id: int) -> tuple[int, ...]:
        self.freeze()
        assert self._var_cons is not None
        return self._var_cons[var_id]

    def all_variable_ids(self) -> frozenset[int]:
        return frozenset(range(len(self.variables)))

    def as_subgraph(self) -> "Subgraph":
        return induced_subgraph(self, self.all_variable_ids())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FactoredNlp):
            return NotImplemented
        return self.variables == other.variables and self.constraints == other.constraints

    def __repr__(self) -> str:
        return f"FactoredNlp(|X|={len(self.variables)}, |H|={len(self.constraints)})"


@dataclass(frozen=True)
class Subgraph:
    """Variable-induced subgraph: variables plus all constraints scoped inside."""

    parent: FactoredNlp = field(compare=False)
    variable_ids: frozenset[int]
    constraint_ids: frozenset[int]

    def variables(self) -> Iterator[VariableNode]:
        for i in sorted(self.variable_ids):
            yield self.parent.variables[i]

    def constraints(self) -> Iterator[ConstraintNode]:
        for a in sorted(self.constraint_ids):
            yield self.parent.constraints[a]

    @property
    def n_variables(self) -> int:
        return len(self.variable_ids)

    def restrict(self, variable_ids: Iterable[int]) -> "Subgraph":
        """Variable-induced subgraph of the parent over a subset of this one."""
        sub_ids = frozenset(variable_ids)
        if not sub_ids <= self.variable_ids:
            raise GraphError("restriction is not a subset of the subgraph")
        return induced_subgraph(self.parent, sub_ids)


def induced_subgraph(graph: FactoredNlp, variable_ids: Iterable[int]) -> Subgraph:
    """Variables plus every constraint whose full scope lies inside them."""
    graph.freeze()
    vids = frozenset(int(i) for i in variable_ids)
    for i in vids:
        if not 0 <= i < len(graph.variables):
            raise GraphError(f"unknown variable id {i}")
    cons = frozenset(
        con.id for con in graph.constraints if all(i in vids for i in con.scope)
    )
    return Subgraph(graph, vids, cons)


def as_subgraph(target: "FactoredNlp | Subgraph") -> Subgraph:
    if isinstance(target, Subgraph):
        return target
    return target.as_subgraph()


class _UnionFind:
    def __init__(self, items: Iterable[int]) -> None:
        self.parent = {i: i for i in items}

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def connected_components(sub: Subgraph) -> list[Subgraph]:
    """Maximal connected pieces of the bipartite subgraph.

    Each piece is variable-induced closed with respect to the input; pieces
    are returned in ascending order of their smallest variable id.
    """
    if not sub.variable_ids:
        return []
    uf = _UnionFind(sub.variable_ids)
    for con in sub.constraints():
        first = con.scope[0]
        for i in con.scope[1:]:
            uf.union(first, i)
    groups: dict[int, set[int]] = {}
    for i in sub.variable_ids:
        groups.setdefault(uf.find(i), set()).add(i)
    pieces = []
    for root in sorted(groups, key=lambda r: min(groups[r])):
        vids = frozenset(groups[root])
        cons = frozenset(a for a in sub.constraint_ids if sub.parent.constraints[a].scope[0] in vids)
        pieces.append(Subgraph(sub.parent, vids, cons))
    return pieces


def is_supergraph(a: Subgraph, b: Subgraph) -> bool:
    """True iff b's variable set is contained in a's (same parent graph)."""
    if a.parent is not b.parent:
        raise GraphError("subgraphs have different parent graphs")
    return b.variable_ids <= a.variable_ids


# -- serialization ----------------------------------------------------------


def graph_to_doc(graph: FactoredNlp) -> dict:
    return {
        "variables": [
            {
                "id": v.id,
                "dim": v.dim,
                "class": v.class_tag.value,
                "time": v.time_index,
                "geometry": list(v.geometry),
            }
            for v in graph.variables
        ],
        "constraints": [
            {
                "id": c.id,
                "kind": c.kind.value,
                "scope": list(c.scope),
                "params": list(c.params),
                "equality": c.is_equality,
            }
            for c in graph.constraints
        ],
    }


def graph_from_doc(doc: dict) -> FactoredNlp:
    if not isinstance(doc, dict):
        raise GraphError(f"graph document must be an object, got {type(doc).__name__}")
    for key in ("variables", "constraints"):
        if key not in doc:
            raise GraphError(f"graph document missing top-level key {key!r}")
    graph = FactoredNlp()
    classes = {c.value: c for c in VarClass}
    kinds = {k.value: k for k in Kind}
    for pos, rec in enumerate(doc["variables"]):
        try:
            if rec["id"] != pos:
                raise GraphError(f"variable ids must be dense, got {rec['id']} at position {pos}")
            cls = classes.get(rec["class"])
            if cls is None:
                raise GraphError(f"unknown variable class {rec['class']!r}")
            graph.add_variable(rec["dim"], cls, rec["time"], rec["geometry"])
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed variable record at position {pos}: {exc!r}") from exc
    for pos, rec in enumerate(doc["constraints"]):
        try:
            if rec["id"] != pos:
                raise GraphError(f"constraint ids must be dense, got {rec['id']} at position {pos}")
            kind = kinds.get(rec["kind"])
            if kind is None:
                raise GraphError(f"unknown constraint kind {rec['kind']!r}")
            cid = graph.add_constraint(kind, rec["scope"], rec["params"])
            if bool(rec["equality"]) != graph.constraints[cid].is_equality:
                raise GraphError(f"constraint {pos}: equality flag does not match kind")
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed constraint record at position {pos}: {exc!r}") from exc
    return graph.freeze()


def serialize(graph: FactoredNlp) -> bytes:
    """Graph as canonical JSON; bit-exact for all real values."""
    return json.dumps(graph_to_doc(graph), sort_keys=True).encode("utf-8")


def deserialize(data: bytes) -> FactoredNlp:
    try:
        doc = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise GraphError(f"graph stream is not valid UTF-8 at byte {exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise GraphError(f"graph stream is not valid JSON: {exc.msg} at position {exc.pos}") from exc
    return graph_from_doc(doc)
