"""Feasibility solver for factored nonlinear programs.

Residuals follow the convention h(x) <= 0 for inequality rows, h(x) = 0 for
equality rows.  Feasibility of a (sub)graph is decided by multi-start
augmented-Lagrangian minimization of constraint violation; the inner
unconstrained problems are solved with a damped Gauss-Newton iteration that
only accepts merit-decreasing steps.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .graph import (
    POS_BOX,
    POS_DISC,
    ConstraintNode,
    FactoredNlp,
    Kind,
    Subgraph,
    VarClass,
    as_subgraph,
)


class SolverFailure(RuntimeError):
    """Non-finite values encountered while iterating; distinct from infeasible."""


@dataclass
class SolverConfig:
    feas_tol: float = 1e-4
    max_outer_iters: int = 20
    max_inner_iters: int = 30
    restarts: int = 5
    penalty_init: float = 1.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    init_noise: float = 0.1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.feas_tol <= 0:
            raise ValueError("feas_tol must be > 0")
        if self.penalty_growth <= 1:
            raise ValueError("penalty_growth must be > 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        bad = set(data) - known
        if bad:
            raise ValueError(f"unknown solver config keys: {sorted(bad)}")
        return cls(**data)


@dataclass
class Assignment:
    """Values for every variable of the solved (sub)graph."""

    values: dict[int, np.ndarray]

    def vector(self, var_id: int) -> np.ndarray:
        return self.values[var_id]


@dataclass
class SolveOutcome:
    feasible: bool
    assignment: Assignment | None
    max_violation: float
    restarts_used: int
    iterations: int


DEFAULT_CONFIG = SolverConfig()


class _Counter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._n = 0

    def increment(self) -> None:
        with self._lock:
            self._n += 1

    def value(self) -> int:
        with self._lock:
            return self._n

    def reset(self) -> None:
        with self._lock:
            self._n = 0


_COUNTER = _Counter()


def count_solves() -> int:
    """Monotone counter of solve() invocations since the last reset."""
    return _COUNTER.value()


def reset_solve_count() -> None:
    _COUNTER.reset()


# -- per-constraint residuals and Jacobians ---------------------------------


def _check_values(con: ConstraintNode, graph_dims: Sequence[int], values: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(values) != len(con.scope):
        raise ValueError(f"constraint {con.id}: expected {len(con.scope)} value vectors, got {len(values)}")
    out = []
    for dim, val in zip(graph_dims, values):
        arr = np.asarray(val, dtype=float).reshape(-1)
        if arr.shape[0] != dim:
            raise ValueError(f"constraint {con.id}: value of length {arr.shape[0]} for dim-{dim} variable")
        out.append(arr)
    return out


def _kin_slots(con: ConstraintNode) -> tuple[int, int | None, int, int | None, np.ndarray, np.ndarray]:
    has_old, has_new = int(con.params[0]), int(con.params[1])
    old_origin = np.array(con.params[2:4])
    new_origin = np.array(con.params[4:6])
    pos = 0
    prev_slot = pos
    pos += 1
    old_slot = None
    if has_old:
        old_slot = pos
        pos += 1
    new_rel_slot = pos
    pos += 1
    new_par_slot = None
    if has_new:
        new_par_slot = pos
    return prev_slot, old_slot, new_rel_slot, new_par_slot, old_origin, new_origin


def _unit_or_first_axis(d: np.ndarray) -> np.ndarray:
    # Subgradient convention at coincident points: direction along the first axis.
    nrm = float(np.linalg.norm(d))
    if nrm == 0.0:
        u = np.zeros_like(d)
        u[0] = 1.0
        return u
    return d / nrm


def residual(con: ConstraintNode, values: Sequence[np.ndarray], dims: Sequence[int] | None = None) -> np.ndarray:
    """Residual vector of one constraint at the given scope values."""
    if dims is None:
        dims = [np.asarray(v).reshape(-1).shape[0] for v in values]
    vals = _check_values(con, dims, values)
    k = con.kind
    if k is Kind.REF:
        return vals[0] - np.array(con.params)
    if k is Kind.EQUAL:
        return vals[0] - vals[1]
    if k is Kind.POSE_DIFF:
        if len(vals) == 2:
            return vals[0] - (np.array(con.params) + vals[1])
        return vals[0] - (vals[2] + vals[1])
    if k is Kind.KIN:
        prev_s, old_s, new_s, npar_s, old_o, new_o = _kin_slots(con)
        old_pose = (vals[old_s] if old_s is not None else old_o) + vals[prev_s]
        new_pose = (vals[npar_s] if npar_s is not None else new_o) + vals[new_s]
        return old_pose - new_pose
    if k is Kind.GRASP:
        return vals[0] - np.array(con.params)
    if k is Kind.POS:
        p = vals[0]
        if con.params[0] == POS_BOX:
            _, cx, cy, ex, ey = con.params
            dx, dy = p[0] - cx, p[1] - cy
            return np.array([dx - ex, -dx - ex, dy - ey, -dy - ey])
        _, cx, cy, rad = con.params
        return np.array([np.linalg.norm(p - np.array([cx, cy])) - rad])
    if k is Kind.COLLISION:
        ra, rb, clear = con.params
        d = vals[0] - vals[1]
        return np.array([ra + rb + clear - np.linalg.norm(d)])
    if k is Kind.LINEAR_INEQ:
        total = sum(len(v) for v in vals)
        m = int(con.params[0])
        mat = np.array(con.params[1 : 1 + m * total]).reshape(m, total)
        offs = np.array(con.params[1 + m * total :])
        return mat @ np.concatenate(vals) + offs
    raise ValueError(f"unknown constraint kind {k!r}")


def jacobian(con: ConstraintNode, values: Sequence[np.ndarray], dims: Sequence[int] | None = None) -> np.ndarray:
    """Analytic Jacobian, shape residual_dim x (sum of scope dims)."""
    if dims is None:
        dims = [np.asarray(v).reshape(-1).shape[0] for v in values]
    vals = _check_values(con, dims, values)
    sizes = [len(v) for v in vals]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offs[-1])
    J = np.zeros((con.residual_dim, total))

    def block(slot: int) -> slice:
        return slice(int(offs[slot]), int(offs[slot + 1]))

    k = con.kind
    if k in (Kind.REF, Kind.GRASP):
        J[:, block(0)] = np.eye(sizes[0])
        return J
    if k is Kind.EQUAL:
        J[:, block(0)] = np.eye(sizes[0])
        J[:, block(1)] = -np.eye(sizes[0])
        return J
    if k is Kind.POSE_DIFF:
        J[:, block(0)] = np.eye(2)
        J[:, block(1)] = -np.eye(2)
        if len(vals) == 3:
            J[:, block(2)] = -np.eye(2)
        return J
    if k is Kind.KIN:
        prev_s, old_s, new_s, npar_s, _, _ = _kin_slots(con)
        J[:, block(prev_s)] = np.eye(2)
        if old_s is not None:
            J[:, block(old_s)] = np.eye(2)
        J[:, block(new_s)] = -np.eye(2)
        if npar_s is not None:
            J[:, block(npar_s)] = -np.eye(2)
        return J
    if k is Kind.POS:
        if con.params[0] == POS_BOX:
            J[:, block(0)] = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        else:
            u = _unit_or_first_axis(vals[0] - np.array(con.params[1:3]))
            J[0, block(0)] = u
        return J
    if k is Kind.COLLISION:
        u = _unit_or_first_axis(vals[0] - vals[1])
        J[0, block(0)] = -u
        J[0, block(1)] = u
        return J
    if k is Kind.LINEAR_INEQ:
        m = int(con.params[0])
        J[:, :] = np.array(con.params[1 : 1 + m * total]).reshape(m, total)
        return J
    raise ValueError(f"unknown constraint kind {k!r}")


# -- compiled subproblem -----------------------------------------------------


class _Compiled:
    """Stacked residual/Jacobian evaluator for one subgraph.

    All kinds except Collision and Pos-disc are affine in x, so the bulk of
    the system is precomputed as (A, b); the few nonlinear rows are patched
    in per evaluation.
    """

    def __init__(self, sub: Subgraph) -> None:
        parent = sub.parent
        self.var_ids = sorted(sub.variable_ids)
        self.var_nodes = [parent.variables[i] for i in self.var_ids]
        self.dims = [parent.variables[i].dim for i in self.var_ids]
        self.offsets = {}
        pos = 0
        for vid, dim in zip(self.var_ids, self.dims):
            self.offsets[vid] = pos
            pos += dim
        self.n = pos
        cons = [parent.constraints[a] for a in sorted(sub.constraint_ids)]
        self.m = sum(c.residual_dim for c in cons)
        self.eq_mask = np.zeros(self.m, dtype=bool)
        A = np.zeros((self.m, self.n))
        b = np.zeros(self.m)
        coll_rows: list[int] = []
        coll_c1: list[int] = []
        coll_c2: list[int] = []
        coll_rsum: list[float] = []
        disc_rows: list[int] = []
        disc_c: list[int] = []
        disc_center: list[tuple[float, float]] = []
        disc_rad: list[float] = []
        row = 0
        for con in cons:
            r = con.residual_dim
            if con.is_equality:
                self.eq_mask[row : row + r] = True
            k = con.kind
            if k is Kind.COLLISION:
                coll_rows.append(row)
                coll_c1.append(self.offsets[con.scope[0]])
                coll_c2.append(self.offsets[con.scope[1]])
                coll_rsum.append(con.params[0] + con.params[1] + con.params[2])
            elif k is Kind.POS and con.params[0] == POS_DISC:
                disc_rows.append(row)
                disc_c.append(self.offsets[con.scope[0]])
                disc_center.append((con.params[1], con.params[2]))
                disc_rad.append(con.params[3])
            else:
                cols = np.concatenate(
                    [np.arange(self.offsets[i], self.offsets[i] + parent.variables[i].dim) for i in con.scope]
                )
                Jc = jacobian(con, [np.zeros(parent.variables[i].dim) for i in con.scope])
                rc = residual(con, [np.zeros(parent.variables[i].dim) for i in con.scope])
                A[row : row + r, cols] = Jc
                b[row : row + r] = rc
            row += r
        self.A = A
        self.b = b
        self.coll_rows = np.array(coll_rows, dtype=int)
        self.coll_c1 = np.array(coll_c1, dtype=int)
        self.coll_c2 = np.array(coll_c2, dtype=int)
        self.coll_rsum = np.array(coll_rsum)
        self.disc_rows = np.array(disc_rows, dtype=int)
        self.disc_c = np.array(disc_c, dtype=int)
        self.disc_center = np.array(disc_center).reshape(-1, 2)
        self.disc_rad = np.array(disc_rad)

    def _pair_diffs(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c1, c2 = self.coll_c1, self.coll_c2
        d = np.stack([x[c1] - x[c2], x[c1 + 1] - x[c2 + 1]], axis=1)
        return d, np.linalg.norm(d, axis=1)

    def _disc_diffs(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self.disc_c
        d = np.stack([x[c], x[c + 1]], axis=1) - self.disc_center
        return d, np.linalg.norm(d, axis=1)

    def values(self, x: np.ndarray) -> np.ndarray:
        v = self.A @ x + self.b
        if self.coll_rows.size:
            _, nrm = self._pair_diffs(x)
            v[self.coll_rows] = self.coll_rsum - nrm
        if self.disc_rows.size:
            _, nrm = self._disc_diffs(x)
            v[self.disc_rows] = nrm - self.disc_rad
        return v

    def values_and_jac(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = self.A @ x + self.b
        J = self.A.copy()
        if self.coll_rows.size:
            d, nrm = self._pair_diffs(x)
            v[self.coll_rows] = self.coll_rsum - nrm
            safe = nrm.copy()
            u = np.zeros_like(d)
            zero = safe == 0.0
            u[zero, 0] = 1.0
            safe[zero] = 1.0
            u[~zero] = d[~zero] / safe[~zero, None]
            for axis in range(2):
                J[self.coll_rows, self.coll_c1 + axis] = -u[:, axis]
                J[self.coll_rows, self.coll_c2 + axis] = u[:, axis]
        if self.disc_rows.size:
            d, nrm = self._disc_diffs(x)
            v[self.disc_rows] = nrm - self.disc_rad
            safe = nrm.copy()
            u = np.zeros_like(d)
            zero = safe == 0.0
            u[zero, 0] = 1.0
            safe[zero] = 1.0
            u[~zero] = d[~zero] / safe[~zero, None]
            for axis in range(2):
                J[self.disc_rows, self.disc_c + axis] = u[:, axis]
        return v, J

    def violation(self, v: np.ndarray) -> float:
        if not v.size:
            return 0.0
        mag = np.where(self.eq_mask, np.abs(v), np.maximum(v, 0.0))
        return float(mag.max())

    def init_point(self, rng: np.random.Generator, noise: float) -> np.ndarray:
        # Reference point per variable class; OBJ_ABS geometry carries no
        # pose, so those start at the centroid of the anchored variables.
        x = np.zeros(self.n)
        anchors = [
            var.geometry[:2]
            for var in self.var_nodes
            if var.class_tag in (VarClass.ROBOT, VarClass.OBJ_REL) and len(var.geometry) >= 2
        ]
        centroid = np.mean(np.array(anchors), axis=0) if anchors else np.zeros(2)
        for var in self.var_nodes:
            off = self.offsets[var.id]
            ref = np.zeros(var.dim)
            if var.class_tag in (VarClass.ROBOT, VarClass.OBJ_REL):
                src = np.array(var.geometry[: min(2, var.dim)])
            else:
                src = centroid[: min(2, var.dim)]
            ref[: src.size] = src
            x[off : off + var.dim] = ref + rng.normal(0.0, noise, var.dim)
        return x


def _merit(comp: _Compiled, v: np.ndarray, shift: np.ndarray) -> float:
    r = v + shift
    r = np.where(comp.eq_mask, r, np.maximum(r, 0.0))
    return 0.5 * float(r @ r)


def _lm_minimize(comp: _Compiled, x: np.ndarray, shift: np.ndarray, max_iters: int) -> np.ndarray:
    """Damped Gauss-Newton on the shifted penalty; accepts only decreasing steps."""
    nu = 1e-3
    v = comp.values(x)
    f = _merit(comp, v, shift)
    eye = np.eye(comp.n)
    for _ in range(max_iters):
        v, J = comp.values_and_jac(x)
        if not np.isfinite(v).all():
            raise SolverFailure("non-finite residuals during inner iteration")
        r = v + shift
        active = comp.eq_mask | (r > 0.0)
        r = np.where(active, r, 0.0)
        g = J.T @ r
        if float(np.abs(g).max(initial=0.0)) < 1e-9 * max(1.0, f):
            break
        Ja = J[active]
        H = Ja.T @ Ja
        accepted = False
        for _trial in range(10):
            try:
                delta = np.linalg.solve(H + nu * eye, -g)
            except np.linalg.LinAlgError:
                nu *= 10.0
                continue
            x_new = x + delta
            f_new = _merit(comp, comp.values(x_new), shift)
            if np.isfinite(f_new) and f_new < f - 1e-15:
                improved = (f - f_new) > 1e-10 * max(1.0, f)
                x, f = x_new, f_new
                nu = max(nu / 3.0, 1e-12)
                accepted = improved
                break
            nu *= 4.0
        if not accepted:
            break
    return x


def _eq_prepass(comp: _Compiled, x: np.ndarray) -> np.ndarray:
    """Regularized least squares on the equality rows only.

    Places the chained/anchored variables consistently before the augmented
    Lagrangian loop has to fight the nonconvex collision terms.
    """
    eq = comp.eq_mask
    if not eq.any():
        return x
    A = comp.A[eq]
    b = comp.b[eq]
    reg = 1e-6
    H = A.T @ A + reg * np.eye(comp.n)
    rhs = -A.T @ b + reg * x
    try:
        return np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return x


def solve(target: FactoredNlp | Subgraph, config: SolverConfig | None = None) -> SolveOutcome:
    """Decide feasibility of a graph or variable-induced subgraph.

    Returns feasible=True with an assignment whose max violation is at most
    feas_tol, or feasible=False once every restart has converged without
    reaching the tolerance.  Deterministic given config.rng_seed.
    """
    cfg = config or DEFAULT_CONFIG
    _COUNTER.increment()
    sub = as_subgraph(target)
    comp = _Compiled(sub)
    if comp.n == 0:
        return SolveOutcome(True, Assignment({}), 0.0, 0, 0)

    best_viol = np.inf
    total_iters = 0
    for restart in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(restart,)))
        x = comp.init_point(rng, cfg.init_noise * (1.0 + restart))
        x = _eq_prepass(comp, x)
        mult = np.zeros(comp.m)
        rho = cfg.penalty_init
        prev_viol = np.inf
        stall = 0
        for _outer in range(cfg.max_outer_iters):
            total_iters += 1
            x = _lm_minimize(comp, x, mult / rho, cfg.max_inner_iters)
            v = comp.values(x)
            if not np.isfinite(v).all():
                raise SolverFailure("non-finite residuals after inner minimization")
            viol = comp.violation(v)
            if viol <= cfg.feas_tol:
                values = {
                    vid: x[comp.offsets[vid] : comp.offsets[vid] + dim].copy()
                    for vid, dim in zip(comp.var_ids, comp.dims)
                }
                assert viol <= cfg.feas_tol  # soundness of "feasible"
                return SolveOutcome(True, Assignment(values), viol, restart + 1, total_iters)
            mult = np.where(comp.eq_mask, mult + rho * v, np.maximum(0.0, mult + rho * v))
            if viol > 0.9 * prev_viol:
                rho = min(rho * cfg.penalty_growth**2, cfg.penalty_max)
            elif viol > 0.25 * prev_viol:
                rho = min(rho * cfg.penalty_growth, cfg.penalty_max)
            # a restart has converged when the violation stops improving at
            # (or on the way to) the penalty cap
            if viol > prev_viol - 1e-3 * cfg.feas_tol:
                stall += 1
                if stall >= 2 and rho >= cfg.penalty_max:
                    break
                if stall >= 3:
                    break
            else:
                stall = 0
            prev_viol = min(prev_viol, viol)
        best_viol = min(best_viol, prev_viol)
    return SolveOutcome(False, None, float(best_viol), cfg.restarts, total_iters)


SolveFn = Callable[[FactoredNlp | Subgraph], SolveOutcome]


def make_solver(config: SolverConfig | None = None) -> SolveFn:
    """Bind a config into a plain solve(sub) callable."""
    cfg = config or DEFAULT_CONFIG

    def solve_fn(target: FactoredNlp | Subgraph) -> SolveOutcome:
        return solve(target, cfg)

    return solve_fn
