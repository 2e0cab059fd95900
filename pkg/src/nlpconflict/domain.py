"""Planar desk-scale manipulation-keyframe problem generator.

The world is a side view: tables are intervals on the ground, objects are
discs resting on tables or on each other, robots are base-anchored point
grippers with a reach-radius disc.  A manipulation sequence (pick / place /
handover) compiles to a factored nonlinear program with one column of
variables per keyframe: a relative pose and an absolute pose per object plus
one configuration per robot, wired with Ref / Equal / PoseDiff / Kin / Grasp
/ Pos / Collision constraints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .conflicts import Conflict, LabeledInstance, expert_prefix, label_variables, quickxplain
from .graph import (
    POS_BOX,
    POS_DISC,
    FactoredNlp,
    Kind,
    VarClass,
    graph_from_doc,
    graph_to_doc,
    induced_subgraph,
)
from .solver import SolverConfig, make_solver

GRIPPER_RADIUS = 0.05
CLEARANCE = 0.01
STACK_LATERAL_FRAC = 0.6
#: infeasible labels are kept only when the best-found violation clears this
#: many multiples of the feasibility tolerance
MARGIN_FACTOR = 10.0


class DomainError(ValueError):
    """Invalid scene, action sequence, or sampling failure."""


@dataclass(frozen=True)
class RobotSpec:
    base: tuple[float, float, float]  # (x, y, theta)
    reach: float


@dataclass(frozen=True)
class BodySpec:
    start: tuple[float, float]
    half: float
    movable_kind: str  # "block" | "obstacle"


@dataclass(frozen=True)
class TableSpec:
    x_lo: float
    x_hi: float
    y_surface: float = 0.0


@dataclass(frozen=True)
class Scene:
    robots: tuple[RobotSpec, ...]
    blocks: tuple[BodySpec, ...]
    obstacles: tuple[BodySpec, ...]
    tables: tuple[TableSpec, ...]
    rng_seed: int

    @property
    def objects(self) -> tuple[BodySpec, ...]:
        return self.blocks + self.obstacles


@dataclass(frozen=True)
class Action:
    verb: str  # "pick" | "place" | "handover"
    obj: int
    robot: int
    target: tuple[str, int]  # ("table", k) | ("object", j) | ("robot", r)


@dataclass(frozen=True)
class RegimeSpec:
    name: str
    n_blocks: int
    n_obstacles: int
    n_robots: int
    min_len: int
    max_len: int


REGIMES = {
    "train": RegimeSpec("train", 3, 2, 2, 4, 7),
    "+blocks": RegimeSpec("+blocks", 5, 2, 2, 4, 7),
    "+robots": RegimeSpec("+robots", 3, 2, 3, 4, 7),
    "+actions": RegimeSpec("+actions", 3, 2, 2, 8, 10),
}


def random_scene(
    n_blocks: int,
    n_obstacles: int,
    n_robots: int,
    rng_seed: int,
    max_attempts: int = 400,
) -> Scene:
    """Rejection-sampled valid scene; deterministic per seed."""
    if min(n_blocks, n_obstacles, n_robots) < 0:
        raise DomainError("counts must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=rng_seed, spawn_key=(17,)))
    split = rng.uniform(1.6, 2.4)
    tables = (TableSpec(0.1, round(split - 0.1, 6)), TableSpec(round(split + 0.1, 6), 3.9))

    robots = []
    for _ in range(n_robots):
        for _attempt in range(max_attempts):
            bx = rng.uniform(0.2, 3.8)
            by = rng.uniform(0.7, 1.0)
            theta = rng.uniform(-np.pi, np.pi)
            reach = rng.uniform(1.2, 2.1)
            if all(abs(bx - r.base[0]) >= 0.25 for r in robots):
                robots.append(RobotSpec((bx, by, theta), reach))
                break
        else:
            raise DomainError("sampling budget exhausted placing robots")

    placed: list[BodySpec] = []

    def sample_body(half: float, kind: str) -> BodySpec:
        for _attempt in range(max_attempts):
            table = tables[rng.integers(0, len(tables))]
            lo, hi = table.x_lo + half, table.x_hi - half
            if lo >= hi:
                continue
            x = rng.uniform(lo, hi)
            y = table.y_surface + half
            ok = all(
                np.hypot(x - b.start[0], y - b.start[1]) >= half + b.half + 3 * CLEARANCE
                for b in placed
            )
            if ok:
                body = BodySpec((x, y), half, kind)
                placed.append(body)
                return body
        raise DomainError("sampling budget exhausted placing objects (scene overcrowded)")

    blocks = tuple(sample_body(float(rng.uniform(0.08, 0.13)), "block") for _ in range(n_blocks))
    obstacles = tuple(sample_body(float(rng.uniform(0.20, 0.32)), "obstacle") for _ in range(n_obstacles))
    return Scene(tuple(robots), blocks, obstacles, tables, rng_seed)


class _SymState:
    """Symbolic kinematic state used by the generator and the compiler."""

    def __init__(self, scene: Scene) -> None:
        self.scene = scene
        n_obj = len(scene.objects)
        self.parent: list[tuple[str, int]] = [("world", -1)] * n_obj
        self.region: list[int] = [self._start_region(o) for o in range(n_obj)]
        self.moved: list[bool] = [False] * n_obj
        self.holding: list[int] = [-1] * len(scene.robots)  # robot -> object or -1

    def _start_region(self, o: int) -> int:
        x = self.scene.objects[o].start[0]
        for k, t in enumerate(self.scene.tables):
            if t.x_lo <= x <= t.x_hi:
                return k
        return 0

    def clear(self, o: int) -> bool:
        return all(p != ("object", o) for p in self.parent)

    def resting(self, o: int) -> bool:
        return self.parent[o][0] != "robot"

    def apply(self, act: Action) -> None:
        kind, obj, robot = act.verb, act.obj, act.robot
        n_obj = len(self.scene.objects)
        if not (0 <= obj < n_obj) or not (0 <= robot < len(self.scene.robots)):
            raise DomainError(f"action references unknown object/robot: {act}")
        if kind == "pick":
            if self.holding[robot] != -1:
                raise DomainError(f"robot {robot} already holds an object: {act}")
            if self.parent[obj][0] == "robot":
                raise DomainError(f"object {obj} is already held: {act}")
            if not self.clear(obj):
                raise DomainError(f"object {obj} is not clear: {act}")
            self.parent[obj] = ("robot", robot)
            self.holding[robot] = obj
            self.moved[obj] = True
        elif kind == "place":
            if self.parent[obj] != ("robot", robot):
                raise DomainError(f"object {obj} is not held by robot {robot}: {act}")
            where, idx = act.target
            if where == "table":
                if not (0 <= idx < len(self.scene.tables)):
                    raise DomainError(f"unknown table region {idx}: {act}")
                self.parent[obj] = ("world", -1)
                self.region[obj] = idx
            elif where == "object":
                if idx == obj or not (0 <= idx < n_obj):
                    raise DomainError(f"invalid placement target object {idx}: {act}")
                if not self.resting(idx) or not self.clear(idx):
                    raise DomainError(f"placement target object {idx} is not a resting, clear object: {act}")
                self.parent[obj] = ("object", idx)
            else:
                raise DomainError(f"invalid place target {act.target!r}")
            self.holding[robot] = -1
        elif kind == "handover":
            where, giver = act.target
            if where != "robot" or not (0 <= giver < len(self.scene.robots)) or giver == robot:
                raise DomainError(f"invalid handover source {act.target!r}")
            if self.parent[obj] != ("robot", giver):
                raise DomainError(f"object {obj} is not held by robot {giver}: {act}")
            if self.holding[robot] != -1:
                raise DomainError(f"receiving robot {robot} already holds an object: {act}")
            self.parent[obj] = ("robot", robot)
            self.holding[giver] = -1
            self.holding[robot] = obj
            self.moved[obj] = True
        else:
            raise DomainError(f"unknown action verb {kind!r}")


def random_actions(scene: Scene, length: int, rng_seed: int, easy: bool = False) -> list[Action]:
    """Symbolically valid action sequence biased toward tower building.

    With easy=True every choice prefers the nearest robot/table/target, which
    makes the compiled program much more likely to be feasible; mixing easy
    and unconstrained sequences balances the dataset labels.
    """
    if length < 1:
        raise DomainError("length must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=rng_seed, spawn_key=(23,)))
    state = _SymState(scene)
    n_obj = len(scene.objects)
    n_blocks = len(scene.blocks)
    actions: list[Action] = []
    near_robot_p = 1.0 if easy else 0.8
    near_table_p = 1.0 if easy else 0.75
    handover_p = 0.0 if easy else 0.2

    def nearest_robot(o: int, candidates: Sequence[int]) -> int:
        pos = scene.objects[o].start
        dists = [(np.hypot(scene.robots[r].base[0] - pos[0], scene.robots[r].base[1] - pos[1]), r) for r in candidates]
        return min(dists)[1]

    def nearest_table(r: int) -> int:
        bx = scene.robots[r].base[0]
        spans = [(abs(0.5 * (t.x_lo + t.x_hi) - bx), k) for k, t in enumerate(scene.tables)]
        return min(spans)[1]

    def nearest_target(r: int, candidates: Sequence[int]) -> int:
        bx = scene.robots[r].base[0]
        return min((abs(scene.objects[p].start[0] - bx), p) for p in candidates)[1]

    for _step in range(length):
        held = [(r, o) for r, o in enumerate(state.holding) if o != -1]
        act: Action | None = None
        if held and rng.uniform() < 0.75:
            robot, obj = held[int(rng.integers(0, len(held)))]
            stack_targets = [
                p for p in range(n_obj) if p != obj and state.resting(p) and state.clear(p)
            ]
            blocks_first = [p for p in stack_targets if p < n_blocks] or stack_targets
            free_robots = [r for r in range(len(scene.robots)) if state.holding[r] == -1]
            u = rng.uniform()
            if u < 0.45 and blocks_first:
                if easy:
                    target = ("object", nearest_target(robot, blocks_first))
                else:
                    target = ("object", blocks_first[int(rng.integers(0, len(blocks_first)))])
                act = Action("place", obj, robot, target)
            elif u < 1.0 - handover_p or not free_robots:
                if rng.uniform() < near_table_p:
                    table = nearest_table(robot)
                else:
                    table = int(rng.integers(0, len(scene.tables)))
                act = Action("place", obj, robot, ("table", table))
            else:
                receiver = free_robots[int(rng.integers(0, len(free_robots)))]
                act = Action("handover", obj, receiver, ("robot", robot))
        if act is None:
            free_robots = [r for r in range(len(scene.robots)) if state.holding[r] == -1]
            pickable = [o for o in range(n_obj) if state.resting(o) and state.clear(o)]
            if free_robots and pickable:
                blocks_avail = [o for o in pickable if o < n_blocks]
                pool = blocks_avail if blocks_avail and rng.uniform() < 0.75 else pickable
                obj = pool[int(rng.integers(0, len(pool)))]
                if rng.uniform() < near_robot_p:
                    robot = nearest_robot(obj, free_robots)
                else:
                    robot = free_robots[int(rng.integers(0, len(free_robots)))]
                act = Action("pick", obj, robot, state.parent[obj])
            else:
                # all robots loaded: force a table place
                robot, obj = held[0]
                act = Action("place", obj, robot, ("table", nearest_table(held[0][0])))
        state.apply(act)
        actions.append(act)
    return actions


@dataclass
class _VarIndex:
    rel: dict[tuple[int, int], int] = field(default_factory=dict)  # (t, obj) -> var id
    abs: dict[tuple[int, int], int] = field(default_factory=dict)
    cfg: dict[tuple[int, int], int] = field(default_factory=dict)  # (t, robot) -> var id


def compile(scene: Scene, actions: Sequence[Action]) -> FactoredNlp:  # noqa: A001
    """Deterministic Factored-NLP for a manipulation sequence on a scene.

    A sequence of L actions yields L+1 keyframe columns.  Constraints only
    span a single keyframe, except Equal and Kin which tie keyframes t-1, t.
    """
    graph = FactoredNlp()
    idx = _VarIndex()
    n_obj = len(scene.objects)
    keyframes = len(actions) + 1

    # replay the symbolic states; state[t] holds at keyframe t
    states = [_SymState(scene)]
    for act in actions:
        nxt = _SymState(scene)
        prev = states[-1]
        nxt.parent = list(prev.parent)
        nxt.region = list(prev.region)
        nxt.moved = list(prev.moved)
        nxt.holding = list(prev.holding)
        nxt.apply(act)
        states.append(nxt)

    for t in range(keyframes):
        for o in range(n_obj):
            body = scene.objects[o]
            idx.rel[(t, o)] = graph.add_variable(2, VarClass.OBJ_REL, t, body.start)
        for o in range(n_obj):
            body = scene.objects[o]
            idx.abs[(t, o)] = graph.add_variable(2, VarClass.OBJ_ABS, t, (body.half,))
        for r, robot in enumerate(scene.robots):
            idx.cfg[(t, r)] = graph.add_variable(2, VarClass.ROBOT, t, robot.base + (robot.reach,))

    for t in range(keyframes):
        state = states[t]
        acted_obj = actions[t - 1].obj if t >= 1 else None
        for o in range(n_obj):
            body = scene.objects[o]
            rel, abs_ = idx.rel[(t, o)], idx.abs[(t, o)]
            kind, pid = state.parent[o]
            # geometric consistency between absolute and relative pose
            if kind == "world":
                graph.add_constraint(Kind.POSE_DIFF, [abs_, rel], (0.0, 0.0))
            elif kind == "robot":
                graph.add_constraint(Kind.POSE_DIFF, [abs_, rel, idx.cfg[(t, pid)]])
            else:
                graph.add_constraint(Kind.POSE_DIFF, [abs_, rel, idx.abs[(t, pid)]])
            # mode constraint of the relative pose
            if kind == "world" and not state.moved[o]:
                graph.add_constraint(Kind.REF, [rel], body.start)
            elif kind == "world":
                table = scene.tables[state.region[o]]
                cx = 0.5 * (table.x_lo + table.x_hi)
                ex = 0.5 * (table.x_hi - table.x_lo) - body.half
                cy = table.y_surface + body.half
                graph.add_constraint(Kind.POS, [rel], (POS_BOX, cx, cy, ex, 0.0))
            elif kind == "robot":
                graph.add_constraint(Kind.GRASP, [rel], (0.0, 0.0))
            else:
                support = scene.objects[pid]
                graph.add_constraint(
                    Kind.POS,
                    [rel],
                    (POS_BOX, 0.0, support.half + body.half, STACK_LATERAL_FRAC * support.half, 0.0),
                )
            # time consistency / kinematic switch back to keyframe t-1
            if t >= 1:
                if o != acted_obj:
                    graph.add_constraint(Kind.EQUAL, [idx.rel[(t - 1, o)], rel])
                else:
                    old_kind, old_pid = states[t - 1].parent[o]
                    scope = [idx.rel[(t - 1, o)]]
                    has_old = 0
                    if old_kind == "robot":
                        scope.append(idx.cfg[(t, old_pid)])
                        has_old = 1
                    elif old_kind == "object":
                        scope.append(idx.abs[(t, old_pid)])
                        has_old = 1
                    scope.append(rel)
                    has_new = 0
                    if kind == "robot":
                        scope.append(idx.cfg[(t, pid)])
                        has_new = 1
                    elif kind == "object":
                        scope.append(idx.abs[(t, pid)])
                        has_new = 1
                    graph.add_constraint(
                        Kind.KIN, scope, (float(has_old), float(has_new), 0.0, 0.0, 0.0, 0.0)
                    )
        for r, robot in enumerate(scene.robots):
            cfg = idx.cfg[(t, r)]
            if t == 0:
                graph.add_constraint(Kind.REF, [cfg], robot.base[:2])
            else:
                graph.add_constraint(
                    Kind.POS, [cfg], (POS_DISC, robot.base[0], robot.base[1], robot.reach)
                )
        # pairwise collision among entities, skipping each object's current parent
        entities = [("object", o) for o in range(n_obj)] + [("robot", r) for r in range(len(scene.robots))]
        for i in range(len(entities)):
            for j in range(i + 1, len(entities)):
                ka, ia = entities[i]
                kb, ib = entities[j]
                if ka == "object" and state.parent[ia] == (kb, ib):
                    continue
                if kb == "object" and state.parent[ib] == (ka, ia):
                    continue
                var_a = idx.abs[(t, ia)] if ka == "object" else idx.cfg[(t, ia)]
                var_b = idx.abs[(t, ib)] if kb == "object" else idx.cfg[(t, ib)]
                rad_a = scene.objects[ia].half if ka == "object" else GRIPPER_RADIUS
                rad_b = scene.objects[ib].half if kb == "object" else GRIPPER_RADIUS
                graph.add_constraint(Kind.COLLISION, [var_a, var_b], (rad_a, rad_b, CLEARANCE))
    return graph.freeze()


# -- planted micro-instances -------------------------------------------------

PLANT_PATTERNS = ("contradictory-ref", "unreachable-grasp", "unreachable-place", "blocked-placement")


@dataclass(frozen=True)
class PlantSpec:
    """Recipe for a micro-instance whose minimal conflicts are known."""

    plants: tuple[str, ...]
    fillers: int = 2
    rng_seed: int = 0
    plant_time: int = 0
    filler_span: int = 1


def planted_instance(spec: PlantSpec) -> tuple[FactoredNlp, list[frozenset[int]]]:
    """Graph with conflicts planted by construction, plus those conflicts."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.rng_seed, spawn_key=(31,)))
    graph = FactoredNlp()
    conflicts: list[frozenset[int]] = []
    tau = spec.plant_time

    for plant in spec.plants:
        ox = float(rng.uniform(0.0, 3.5))
        if plant == "contradictory-ref":
            x = graph.add_variable(2, VarClass.OBJ_REL, tau, (ox, 0.1))
            graph.add_constraint(Kind.REF, [x], (ox, 0.1))
            graph.add_constraint(Kind.REF, [x], (ox + 1.2, 0.1))
            conflicts.append(frozenset({x}))
        elif plant == "unreachable-grasp":
            start = (ox, 0.1)
            base = (ox + 2.6, 1.0)
            reach = float(rng.uniform(0.8, 1.2))  # object is ~2.8 away from base
            b_prev = graph.add_variable(2, VarClass.OBJ_REL, tau, start)
            q = graph.add_variable(2, VarClass.ROBOT, tau + 1, base + (0.0, reach))
            b_new = graph.add_variable(2, VarClass.OBJ_REL, tau + 1, start)
            graph.add_constraint(Kind.REF, [b_prev], start)
            graph.add_constraint(Kind.POS, [q], (POS_DISC, base[0], base[1], reach))
            graph.add_constraint(Kind.GRASP, [b_new], (0.0, 0.0))
            graph.add_constraint(Kind.KIN, [b_prev, b_new, q], (0.0, 1.0, 0.0, 0.0, 0.0, 0.0))
            conflicts.append(frozenset({b_prev, q, b_new}))
        elif plant == "unreachable-place":
            base = (ox, 1.0)
            reach = float(rng.uniform(0.6, 0.9))
            b_prev = graph.add_variable(2, VarClass.OBJ_REL, tau, (ox, 0.1))
            q = graph.add_variable(2, VarClass.ROBOT, tau + 1, base + (0.0, reach))
            b_new = graph.add_variable(2, VarClass.OBJ_REL, tau + 1, (ox, 0.1))
            graph.add_constraint(Kind.GRASP, [b_prev], (0.0, 0.0))
            graph.add_constraint(Kind.POS, [q], (POS_DISC, base[0], base[1], reach))
            # target region sits well beyond the reach disc
            graph.add_constraint(Kind.POS, [b_new], (POS_BOX, ox + reach + 2.0, 0.1, 0.3, 0.0))
            graph.add_constraint(Kind.KIN, [b_prev, q, b_new], (1.0, 0.0, 0.0, 0.0, 0.0, 0.0))
            conflicts.append(frozenset({b_prev, q, b_new}))
        elif plant == "blocked-placement":
            p_obs = (ox, 0.3)
            h_obs, h_blk = 0.3, 0.1
            o_rel = graph.add_variable(2, VarClass.OBJ_REL, tau, p_obs)
            o_abs = graph.add_variable(2, VarClass.OBJ_ABS, tau, (h_obs,))
            b_rel = graph.add_variable(2, VarClass.OBJ_REL, tau, (ox, 0.1))
            b_abs = graph.add_variable(2, VarClass.OBJ_ABS, tau, (h_blk,))
            graph.add_constraint(Kind.REF, [o_rel], p_obs)
            graph.add_constraint(Kind.POSE_DIFF, [o_abs, o_rel], (0.0, 0.0))
            graph.add_constraint(Kind.POS, [b_rel], (POS_BOX, p_obs[0], p_obs[1], 0.05, 0.0))
            graph.add_constraint(Kind.POSE_DIFF, [b_abs, b_rel], (0.0, 0.0))
            graph.add_constraint(Kind.COLLISION, [b_abs, o_abs], (h_blk, h_obs, CLEARANCE))
            conflicts.append(frozenset({o_rel, o_abs, b_rel, b_abs}))
        else:
            raise DomainError(f"unknown plant pattern {plant!r}")

    prev_abs: int | None = None
    for k in range(spec.fillers):
        # feasible anchored object, chained over time and loosely coupled by
        # satisfied collision constraints
        fx = 5.0 + 1.5 * k
        start = (fx, 0.1)
        rel0 = graph.add_variable(2, VarClass.OBJ_REL, 0, start)
        abs0 = graph.add_variable(2, VarClass.OBJ_ABS, 0, (0.1,))
        graph.add_constraint(Kind.REF, [rel0], start)
        graph.add_constraint(Kind.POSE_DIFF, [abs0, rel0], (0.0, 0.0))
        last_rel = rel0
        for t in range(1, spec.filler_span + 1):
            rel_t = graph.add_variable(2, VarClass.OBJ_REL, t, start)
            graph.add_constraint(Kind.EQUAL, [last_rel, rel_t])
            last_rel = rel_t
        if prev_abs is not None:
            graph.add_constraint(Kind.COLLISION, [prev_abs, abs0], (0.1, 0.1, CLEARANCE))
        prev_abs = abs0
    return graph.freeze(), conflicts


# -- dataset pipeline ---------------------------------------------------------


def instance_to_record(inst: LabeledInstance, seed: Sequence[int] | None = None) -> dict:
    rec = {
        "graph": graph_to_doc(inst.graph),
        "labels": list(inst.labels),
        "conflicts": [sorted(c.variable_ids) for c in inst.conflicts],
    }
    if seed is not None:
        rec["seed"] = list(seed)
    return rec


def record_to_instance(rec: dict) -> LabeledInstance:
    graph = graph_from_doc(rec["graph"])
    conflicts = [
        Conflict(induced_subgraph(graph, ids), minimal=True) for ids in rec["conflicts"]
    ]
    inst = LabeledInstance(graph, list(rec["labels"]), conflicts)
    inst.check()
    return inst


def generate_graph(regime: RegimeSpec, index: int, rng_seed: int) -> FactoredNlp:
    """Scene + action sequence + compile for one dataset slot; deterministic."""
    ss = np.random.SeedSequence(entropy=(rng_seed, index))
    children = ss.spawn(8)
    s_len, s_act = (int(c.generate_state(1)[0]) for c in children[:2])
    scene = None
    for child in children[2:]:
        try:
            scene = random_scene(
                regime.n_blocks, regime.n_obstacles, regime.n_robots, int(child.generate_state(1)[0])
            )
            break
        except DomainError:
            continue
    if scene is None:
        raise DomainError(f"could not sample a valid scene for instance {index}")
    rng = np.random.default_rng(s_len)
    length = int(rng.integers(regime.min_len, regime.max_len + 1))
    easy = bool(rng.uniform() < 0.45)
    actions = random_actions(scene, length, s_act, easy=easy)
    return compile(scene, actions)


def default_label_reducer(solve) -> "callable":
    """Time-prefix scan followed by QuickXplain; the labeling workhorse."""

    def reduce(sub):
        return expert_prefix(sub, solve, lambda s: quickxplain(s, solve))

    return reduce


#: conflicts larger than this are treated as extraction failures (solved-but-
#: not-minimal outputs of the incomplete solver) and skip the instance
MAX_CONFLICT_SIZE = 14


def label_graph(
    graph: FactoredNlp,
    solver_config: SolverConfig,
    max_conflicts: int = 10,
) -> tuple[LabeledInstance | None, str]:
    """Label one graph; returns (instance, "") or (None, skip reason).

    Infeasible labels must clear MARGIN_FACTOR x feas_tol both on the full
    graph and on every stored conflict, so the incomplete solver cannot
    produce borderline labels.
    """
    solve = make_solver(solver_config)
    out = solve(graph)
    if out.feasible:
        return LabeledInstance(graph, [1] * graph.n_variables, []), ""
    margin = MARGIN_FACTOR * solver_config.feas_tol
    if out.max_violation < margin:
        return None, f"full-graph violation {out.max_violation:.2e} below margin"
    inst = label_variables(graph, solve, default_label_reducer(solve), max_conflicts)
    if not inst.conflicts:
        return None, "no conflict extracted from infeasible graph"
    for conf in inst.conflicts:
        if len(conf.variable_ids) > MAX_CONFLICT_SIZE:
            return None, f"oversized conflict ({len(conf.variable_ids)} variables)"
        conf_out = solve(conf.sub)
        if conf_out.feasible or conf_out.max_violation < margin:
            return None, "stored conflict below violation margin"
    return inst, ""


def _pipeline_worker(args: tuple) -> tuple[int, dict | None, str]:
    regime_name, index, rng_seed, cfg_dict, max_conflicts = args
    regime = REGIMES[regime_name]
    cfg = SolverConfig.from_dict(cfg_dict)
    try:
        graph = generate_graph(regime, index, rng_seed)
        inst, reason = label_graph(graph, cfg, max_conflicts)
    except DomainError as exc:
        return index, None, f"generation failed: {exc}"
    if inst is None:
        return index, None, reason
    return index, instance_to_record(inst, seed=(rng_seed, index)), ""


@dataclass
class DatasetManifest:
    regime: str
    requested: int
    emitted: int
    skipped: list[tuple[int, str]]
    rng_seed: int
    n_feasible: int
    n_infeasible: int
    label_zero_fraction: float

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "requested": self.requested,
            "emitted": self.emitted,
            "skipped": [[i, r] for i, r in self.skipped],
            "rng_seed": self.rng_seed,
            "n_feasible": self.n_feasible,
            "n_infeasible": self.n_infeasible,
            "label_zero_fraction": self.label_zero_fraction,
        }


def build_dataset(
    regime: str,
    n_instances: int,
    rng_seed: int,
    solver_config: SolverConfig | None = None,
    max_conflicts: int = 10,
    workers: int | None = None,
) -> tuple[list[dict], DatasetManifest]:
    """Generate, compile and label n_instances problems of one regime.

    Returns JSONL-ready records (sorted by instance index) plus a manifest
    with class balance and the skipped instances.  Deterministic in
    (regime, n_instances, rng_seed, solver_config), independent of workers.
    """
    if regime not in REGIMES:
        raise DomainError(f"unknown regime {regime!r}; expected one of {sorted(REGIMES)}")
    cfg = solver_config or SolverConfig()
    cfg_dict = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}  # type: ignore[attr-defined]
    tasks = [(regime, i, rng_seed, cfg_dict, max_conflicts) for i in range(n_instances)]
    results: list[tuple[int, dict | None, str]]
    if workers is not None and workers > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_pipeline_worker, tasks, chunksize=8))
    else:
        results = [_pipeline_worker(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    records = [rec for _i, rec, _why in results if rec is not None]
    skipped = [(i, why) for i, rec, why in results if rec is None]
    n_infeas = sum(1 for r in records if r["conflicts"])
    zeros = sum(sum(1 for y in r["labels"] if y == 0) for r in records)
    total = sum(len(r["labels"]) for r in records)
    manifest = DatasetManifest(
        regime=regime,
        requested=n_instances,
        emitted=len(records),
        skipped=skipped,
        rng_seed=rng_seed,
        n_feasible=len(records) - n_infeas,
        n_infeasible=n_infeas,
        label_zero_fraction=(zeros / total) if total else 0.0,
    )
    return records, manifest


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}: bad JSON on line {line_no + 1}: {exc.msg}") from exc
    return out


def load_instances(path) -> list[LabeledInstance]:
    return [record_to_instance(rec) for rec in read_jsonl(path)]
