"""Multi-target descent planning with deferred target commitment.

Given one initial state and n candidate targets (each with a node budget
from time-of-flight bisection and a suboptimality tolerance), the solver
builds a trunk-and-branches trajectory tree: a shared trunk is extended as
far as possible while every remaining target still admits a continuation
whose total cost stays within (1 + eps) of its single-shot optimum, then
the least desirable remaining target is dropped and the process repeats.
The result maximizes each deferral time under the given rejection order.

Every trunk-extension search is an integer bisection over the trunk node
count; each probe is one convex program with shared trunk variables and
per-target branch variables. Feasibility is monotone in the trunk length
(truncating a feasible trunk stays feasible), which makes the bisection
exact.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ControlRangeError, DdtoProbeError, TargetInfeasibleError
from .fileio import atomic_write_text
from .socp import ProgramBuilder, SolveStatus, SolverOptions, solve_conic
from .trajopt import (BoundaryConditions, VehicleParams, _append_descent_block, _Layout,
                      solve_lcvx)

# headroom added to every cost cap: absorbs solver-tolerance wobble so an
# eps = 0 request stays feasible at the single-shot optimum it came from
_CAP_SLACK = 1e-6


@dataclass
class DdtoRequest:
    """Inputs for one tree solve. Rejection order lists n-1 target ids,
    least desirable first; the unlisted target is the final survivor."""

    initial_state: np.ndarray
    target_ids: list[int]
    target_states: np.ndarray       # (n, 6)
    tolerances: np.ndarray          # (n,) >= 0, fractional cost excess
    node_counts: np.ndarray         # (n,) int, per-target budgets
    rejection_order: list[int]
    dt: float
    params: VehicleParams

    def __post_init__(self):
        self.initial_state = np.asarray(self.initial_state, dtype=float)
        self.target_states = np.asarray(self.target_states, dtype=float)
        self.tolerances = np.asarray(self.tolerances, dtype=float)
        self.node_counts = np.asarray(self.node_counts, dtype=int)
        n = len(self.target_ids)
        if n < 2:
            raise ConfigurationError("need at least 2 targets")
        if len(set(self.target_ids)) != n:
            raise ConfigurationError("target ids must be unique")
        if self.target_states.shape != (n, 6):
            raise ConfigurationError("target_states must be (n, 6)")
        if self.tolerances.shape != (n,) or (self.tolerances < 0).any():
            raise ConfigurationError("need n non-negative tolerances")
        if self.node_counts.shape != (n,) or (self.node_counts < 2).any():
            raise ConfigurationError("need n node counts, each >= 2")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        order = list(self.rejection_order)
        if len(order) != n - 1 or len(set(order)) != n - 1 \
                or not set(order) <= set(self.target_ids):
            raise ConfigurationError(
                "rejection order must list n-1 distinct target ids")

    @property
    def num_targets(self) -> int:
        return len(self.target_ids)

    @property
    def survivor(self) -> int:
        return next(j for j in self.target_ids if j not in set(self.rejection_order))

    def index_of(self, target_id: int) -> int:
        return self.target_ids.index(target_id)


def single_target_costs(request: DdtoRequest,
                        options: SolverOptions | None = None) -> dict[int, float]:
    """Optimal single-shot cost to each target at its own node budget."""
    costs: dict[int, float] = {}
    for i, j in enumerate(request.target_ids):
        bc = BoundaryConditions(request.initial_state, request.target_states[i])
        sol = solve_lcvx(bc, request.params, int(request.node_counts[i]), request.dt,
                         options)
        if sol.status is not SolveStatus.OPTIMAL:
            raise TargetInfeasibleError(
                j, f"target {j}: single-shot solve returned {sol.status.value}")
        costs[j] = sol.trajectory.cost
    return costs


@dataclass
class _ProbeBranch:
    controls: np.ndarray   # (M, 3)
    states: np.ndarray     # (M+1, 6)
    gamma: np.ndarray      # (M,)
    total_cost: float      # prefix + trunk extension + branch


@dataclass
class _ProbeSolution:
    trunk_controls: np.ndarray  # (d, 3)
    trunk_states: np.ndarray    # (d+1, 6)
    trunk_gamma: np.ndarray     # (d,)
    trunk_cost: float           # dt * sum(trunk gamma)
    branches: dict[int, _ProbeBranch]


def _solve_probe(z_start: np.ndarray, d: int, prefix_cost: float,
                 alive: list[tuple[int, int, float]], targets: dict[int, np.ndarray],
                 dt: float, params: VehicleParams,
                 options: SolverOptions | None) -> _ProbeSolution | None:
    """One shared-trunk feasibility program.

    `alive` lists (target id, branch node budget, total cost cap). A zero
    budget pins the trunk endpoint to the target itself. Returns None when
    infeasible; raises DdtoProbeError on solver failure.
    """
    trunk = _Layout(d)
    layouts: dict[int, _Layout] = {}
    base = trunk.size
    for j, budget, _cap in alive:
        if budget > 0:
            layouts[j] = _Layout(budget, base)
            base += layouts[j].size
    builder = ProgramBuilder(base)

    if d > 0:
        _append_descent_block(builder, trunk, params, dt, tag="trunk")
    builder.add_equalities(np.arange(6), trunk.x(0), np.ones(6), z_start,
                           group="trunk_start")

    trunk_gamma_cols = trunk.off_g + np.arange(d)
    for j, budget, cap in alive:
        rhs_cap = cap - prefix_cost
        if budget == 0:
            # no branch left: the trunk must arrive exactly at the target
            builder.add_equalities(np.arange(6), trunk.x(d), np.ones(6), targets[j],
                                   group=f"pin_{j}")
            builder.add_upper_bounds(np.zeros(d, dtype=int), trunk_gamma_cols,
                                     np.full(d, dt), np.array([rhs_cap]),
                                     group=f"budget_{j}")
            continue
        lay = layouts[j]
        _append_descent_block(builder, lay, params, dt, tag=f"branch_{j}")
        # branch root rides the trunk endpoint; branch tip hits the target
        rows = np.arange(6)
        builder.add_equalities(np.concatenate([rows, rows]),
                               np.concatenate([lay.x(0), trunk.x(d)]),
                               np.concatenate([np.ones(6), -np.ones(6)]),
                               np.zeros(6), group=f"link_{j}")
        builder.add_equalities(rows, lay.x(budget), np.ones(6), targets[j],
                               group=f"terminal_{j}")
        gcols = lay.off_g + np.arange(budget)
        builder.add_upper_bounds(np.zeros(d + budget, dtype=int),
                                 np.concatenate([trunk_gamma_cols, gcols]),
                                 np.full(d + budget, dt), np.array([rhs_cap]),
                                 group=f"budget_{j}")

    res = solve_conic(builder.build(), options)
    if res.status is SolveStatus.INFEASIBLE:
        return None
    if res.status is not SolveStatus.OPTIMAL:
        raise DdtoProbeError(f"probe (d={d}) failed: {res.status.value} {res.detail}")

    x = res.x
    trunk_controls = x[trunk.off_u:trunk.off_g].reshape(d, 3).copy()
    trunk_gamma = x[trunk.off_g:trunk.off_g + d].copy()
    trunk_cost = float(dt * trunk_gamma.sum())
    branches = {}
    for j, budget, _cap in alive:
        if budget == 0:
            branches[j] = _ProbeBranch(np.zeros((0, 3)), x[trunk.x(d)].reshape(1, 6).copy(),
                                       np.zeros(0), prefix_cost + trunk_cost)
            continue
        lay = layouts[j]
        gam = x[lay.off_g:lay.off_g + budget].copy()
        branches[j] = _ProbeBranch(
            controls=x[lay.off_u:lay.off_g].reshape(budget, 3).copy(),
            states=x[lay.off_x:lay.off_u].reshape(budget + 1, 6).copy(),
            gamma=gam,
            total_cost=prefix_cost + trunk_cost + float(dt * gam.sum()),
        )
    return _ProbeSolution(
        trunk_controls=trunk_controls,
        trunk_states=x[trunk.off_x:trunk.off_u].reshape(d + 1, 6).copy(),
        trunk_gamma=trunk_gamma,
        trunk_cost=trunk_cost,
        branches=branches,
    )


@dataclass
class DdtoSolution:
    """Trunk-and-branches tree plus the concatenated control table."""

    target_ids: list[int]
    dt: float
    rejection_order: list[int]
    survivor: int
    branch_times: np.ndarray          # (n-1,) s
    branch_states: np.ndarray         # (n-1, 6)
    stage_trunk_nodes: list[int]      # d_k per stage
    trunk_controls: np.ndarray        # (sum d_k, 3)
    continuations: list[dict[int, np.ndarray]]  # per stage: id -> (M, 3)
    target_costs: dict[int, float]
    node_counts: dict[int, int]

    def _cumulative_nodes(self, stage: int) -> int:
        return int(sum(self.stage_trunk_nodes[:stage]))

    def canonical_stage(self, target_id: int) -> int:
        """Stage whose stored continuation is this target's own path."""
        if target_id == self.survivor:
            return len(self.stage_trunk_nodes)
        if target_id in self.rejection_order:
            return self.rejection_order.index(target_id) + 1
        raise KeyError(f"unknown target {target_id}")

    def path_controls(self, target_id: int, stage: int | None = None) -> np.ndarray:
        """Full per-node control sequence to a target: shared trunk + branch."""
        stage = self.canonical_stage(target_id) if stage is None else stage
        if not (1 <= stage <= len(self.continuations)):
            raise ControlRangeError(f"no stage {stage} in this solution")
        cont = self.continuations[stage - 1].get(target_id)
        if cont is None:
            raise ControlRangeError(
                f"target {target_id} has no stored continuation at stage {stage}")
        sigma = self._cumulative_nodes(stage)
        return np.vstack([self.trunk_controls[:sigma], cont])

    def trunk_segment(self, stage: int) -> np.ndarray:
        """Controls of deferrable segment `stage` (1-based), shared by all
        targets still alive there."""
        if not (1 <= stage <= len(self.stage_trunk_nodes)):
            raise ControlRangeError(f"no trunk segment {stage}")
        lo = self._cumulative_nodes(stage - 1)
        hi = self._cumulative_nodes(stage)
        return self.trunk_controls[lo:hi]

    def control_vector(self) -> tuple[np.ndarray, list[dict]]:
        """Flat concatenation of every stored control run plus its index table."""
        chunks = [self.trunk_controls.reshape(-1)]
        table = [{"kind": "trunk", "offset": 0,
                  "nodes": int(self.trunk_controls.shape[0])}]
        offset = chunks[0].size
        for k, conts in enumerate(self.continuations, start=1):
            for j in sorted(conts):
                arr = conts[j].reshape(-1)
                table.append({"kind": "branch", "stage": k, "target": int(j),
                              "offset": int(offset), "nodes": int(conts[j].shape[0])})
                chunks.append(arr)
                offset += arr.size
        return np.concatenate(chunks), table

    def to_json(self) -> str:
        vec, table = self.control_vector()
        return json.dumps({
            "dt": self.dt,
            "target_ids": [int(j) for j in self.target_ids],
            "rejection_order": [int(j) for j in self.rejection_order],
            "survivor": int(self.survivor),
            "branch_times": [float(t) for t in self.branch_times],
            "branch_states": [[float(v) for v in z] for z in self.branch_states],
            "target_costs": {str(j): float(c) for j, c in self.target_costs.items()},
            "node_counts": {str(j): int(c) for j, c in self.node_counts.items()},
            "index_table": table,
            "controls": [float(v) for v in vec],
        }, indent=2)


def extract_control(solution: DdtoSolution, target_id: int, t1: float, t2: float,
                    stage: int | None = None) -> np.ndarray:
    """Per-node thrust commands for target `target_id` on [t1, t2).

    Times must be aligned to the node grid. With no stage given, the
    target's own (canonical) path is used; a stage selects the
    continuation stored when that stage's branch point was computed.
    """
    dt = solution.dt
    i1 = t1 / dt
    i2 = t2 / dt
    if abs(i1 - round(i1)) > 1e-6 or abs(i2 - round(i2)) > 1e-6:
        raise ControlRangeError(f"[{t1}, {t2}) is not aligned to the {dt} s grid")
    i1, i2 = int(round(i1)), int(round(i2))
    if i1 > i2 or i1 < 0:
        raise ControlRangeError(f"bad interval [{t1}, {t2})")
    path = solution.path_controls(target_id, stage)
    if i2 > path.shape[0]:
        raise ControlRangeError(
            f"interval [{t1}, {t2}) not covered: target {target_id} path ends "
            f"at {path.shape[0] * dt} s")
    return path[i1:i2].copy()


def ddto_solve(request: DdtoRequest, costs: dict[int, float] | None = None,
               options: SolverOptions | None = None) -> DdtoSolution:
    """Construct the full deferred-decision tree for a request.

    `costs` may carry precomputed single-shot optima (same values
    single_target_costs would return) to avoid re-solving them.
    """
    if costs is None:
        costs = single_target_costs(request, options)
    caps = {}
    budgets = {}
    targets = {}
    for i, j in enumerate(request.target_ids):
        caps[j] = (1.0 + float(request.tolerances[i])) * costs[j] + _CAP_SLACK
        budgets[j] = int(request.node_counts[i])
        targets[j] = request.target_states[i]

    alive = list(request.target_ids)
    z_cur = request.initial_state.copy()
    trunk_total = 0
    prefix = 0.0
    segments: list[np.ndarray] = []
    stage_nodes: list[int] = []
    continuations: list[dict[int, np.ndarray]] = []
    branch_times: list[float] = []
    branch_states: list[np.ndarray] = []
    target_costs: dict[int, float] = {}

    for stage, reject in enumerate(request.rejection_order, start=1):
        probe_alive = [(j, budgets[j] - trunk_total, caps[j]) for j in alive]
        if min(b for _, b, _ in probe_alive) < 0:
            raise DdtoProbeError(f"stage {stage}: a target's node budget is exhausted")
        cache: dict[int, _ProbeSolution | None] = {}

        def attempt(d: int) -> _ProbeSolution | None:
            if d not in cache:
                cache[d] = _solve_probe(
                    z_cur, d, prefix,
                    [(j, b - d, c) for j, b, c in probe_alive],
                    targets, request.dt, request.params, options)
            return cache[d]

        d_hi = min(b for _, b, _ in probe_alive)
        if attempt(0) is None:
            raise DdtoProbeError(
                f"stage {stage}: zero-extension probe infeasible (cost caps too tight)")
        if attempt(d_hi) is not None:
            d_star = d_hi
        else:
            lo, hi = 0, d_hi  # invariant: lo feasible, hi infeasible
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if attempt(mid) is not None:
                    lo = mid
                else:
                    hi = mid
            d_star = lo
        sol = cache[d_star]

        segments.append(sol.trunk_controls)
        stage_nodes.append(d_star)
        trunk_total += d_star
        prefix += sol.trunk_cost
        z_cur = sol.trunk_states[-1].copy()
        branch_times.append(trunk_total * request.dt)
        branch_states.append(z_cur.copy())
        continuations.append({j: br.controls for j, br in sol.branches.items()})
        target_costs[reject] = sol.branches[reject].total_cost
        if stage == len(request.rejection_order):
            target_costs[request.survivor] = sol.branches[request.survivor].total_cost
        alive.remove(reject)

    return DdtoSolution(
        target_ids=list(request.target_ids),
        dt=request.dt,
        rejection_order=list(request.rejection_order),
        survivor=request.survivor,
        branch_times=np.asarray(branch_times),
        branch_states=np.asarray(branch_states),
        stage_trunk_nodes=stage_nodes,
        trunk_controls=np.vstack(segments) if segments else np.zeros((0, 3)),
        continuations=continuations,
        target_costs=target_costs,
        node_counts=dict(budgets),
    )


def controls_to_csv(controls: np.ndarray, dt: float) -> str:
    buf = io.StringIO()
    buf.write("t,T1,T2,T3\n")
    for k, u in enumerate(controls):
        buf.write(f"{k * dt:.9g},{u[0]:.9g},{u[1]:.9g},{u[2]:.9g}\n")
    return buf.getvalue()


def write_solution_json(solution: DdtoSolution, path) -> None:
    atomic_write_text(path, solution.to_json())


def write_target_controls_csv(solution: DdtoSolution, target_id: int, path) -> None:
    atomic_write_text(path, controls_to_csv(solution.path_controls(target_id),
                                            solution.dt))
