"""Standard-form second-order cone programs and a solver-agnostic interface.

A program is stored as

    minimize    c'x
    subject to  A_eq x == b_eq
                A_ub x <= b_ub
                d_i - D_i x  in SOC(q_i)    for each cone block i

where SOC(q) = {(t, u) in R x R^(q-1) : ||u|| <= t}. Construction goes
through :class:`ProgramBuilder`, which accumulates sparse triplets so large
programs assemble without per-row Python overhead. Solving delegates to an
embedded interior-point backend; callers only see :class:`SolveStatus`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import sparse


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    FAILED = "failed"


@dataclass
class SolveResult:
    status: SolveStatus
    x: np.ndarray | None = None
    objective: float | None = None
    iterations: int = 0
    detail: str = ""


@dataclass
class ConicProgram:
    """Immutable assembled program in standard form."""

    num_vars: int
    cost: np.ndarray
    eq_matrix: sparse.csc_matrix
    eq_rhs: np.ndarray
    ub_matrix: sparse.csc_matrix
    ub_rhs: np.ndarray
    soc_matrix: sparse.csc_matrix
    soc_rhs: np.ndarray
    soc_dims: list[int]
    # named constraint-group row/block counts, for inspection and tests
    groups: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        if self.cost.shape != (self.num_vars,):
            raise ValueError("cost length does not match variable count")
        for mat, rhs in ((self.eq_matrix, self.eq_rhs), (self.ub_matrix, self.ub_rhs),
                         (self.soc_matrix, self.soc_rhs)):
            if mat.shape[1] != self.num_vars or mat.shape[0] != rhs.shape[0]:
                raise ValueError("constraint block dimensions are inconsistent")
        if sum(self.soc_dims) != self.soc_rhs.shape[0]:
            raise ValueError("cone dimensions do not cover the cone rows")


class ProgramBuilder:
    """Accumulates a ConicProgram from vectorized triplet appends."""

    def __init__(self, num_vars: int):
        self.num_vars = num_vars
        self._cost = np.zeros(num_vars)
        self._eq = _TripletBlock()
        self._ub = _TripletBlock()
        self._soc = _TripletBlock()
        self._soc_dims: list[int] = []
        self._groups: dict[str, int] = {}

    def add_cost(self, cols, vals) -> None:
        np.add.at(self._cost, np.asarray(cols, dtype=np.intp), np.asarray(vals, dtype=float))

    def add_equalities(self, rows, cols, vals, rhs, group: str | None = None) -> None:
        n = self._eq.append(rows, cols, vals, rhs)
        if group:
            self._groups[group] = self._groups.get(group, 0) + n

    def add_upper_bounds(self, rows, cols, vals, rhs, group: str | None = None) -> None:
        """Rows of A_ub x <= b_ub; `rows` are local to this call (0-based)."""
        n = self._ub.append(rows, cols, vals, rhs)
        if group:
            self._groups[group] = self._groups.get(group, 0) + n

    def add_soc(self, rows, cols, vals, rhs, dim: int, group: str | None = None) -> None:
        """One cone block: rhs - A x in SOC(dim); `rows` local, must span [0, dim)."""
        n = self._soc.append(rows, cols, vals, rhs)
        if n != dim:
            raise ValueError("cone rhs length must equal the cone dimension")
        self._soc_dims.append(dim)
        if group:
            self._groups[group] = self._groups.get(group, 0) + 1

    def add_soc_batch(self, rows, cols, vals, rhs, dims, group: str | None = None) -> None:
        """Many equal-role cone blocks at once; `rows` index into stacked rhs."""
        self._soc.append(rows, cols, vals, rhs)
        dims = list(dims)
        if sum(dims) != len(rhs):
            raise ValueError("stacked cone rhs length must equal the summed dimensions")
        self._soc_dims.extend(dims)
        if group:
            self._groups[group] = self._groups.get(group, 0) + len(dims)

    def build(self) -> ConicProgram:
        prog = ConicProgram(
            num_vars=self.num_vars,
            cost=self._cost,
            eq_matrix=self._eq.matrix(self.num_vars),
            eq_rhs=self._eq.rhs(),
            ub_matrix=self._ub.matrix(self.num_vars),
            ub_rhs=self._ub.rhs(),
            soc_matrix=self._soc.matrix(self.num_vars),
            soc_rhs=self._soc.rhs(),
            soc_dims=self._soc_dims,
            groups=dict(self._groups),
        )
        prog.validate()
        return prog


class _TripletBlock:
    def __init__(self):
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rhs: list[np.ndarray] = []
        self._nrows = 0

    def append(self, rows, cols, vals, rhs) -> int:
        rows = np.atleast_1d(np.asarray(rows, dtype=np.intp))
        cols = np.atleast_1d(np.asarray(cols, dtype=np.intp))
        vals = np.atleast_1d(np.asarray(vals, dtype=float))
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("triplet arrays must share a shape")
        self._rows.append(rows + self._nrows)
        self._cols.append(cols)
        self._vals.append(vals)
        self._rhs.append(rhs)
        self._nrows += rhs.shape[0]
        return rhs.shape[0]

    def matrix(self, num_vars: int) -> sparse.csc_matrix:
        if not self._rows:
            return sparse.csc_matrix((0, num_vars))
        return sparse.csc_matrix(
            (np.concatenate(self._vals), (np.concatenate(self._rows), np.concatenate(self._cols))),
            shape=(self._nrows, num_vars),
        )

    def rhs(self) -> np.ndarray:
        if not self._rhs:
            return np.zeros(0)
        return np.concatenate(self._rhs)


@dataclass
class SolverOptions:
    residual_tol: float = 1e-8
    max_iterations: int = 200


def solve_conic(prog: ConicProgram, options: SolverOptions | None = None) -> SolveResult:
    """Solve a standard-form program with the embedded cone solver.

    Never raises on solver trouble: numerical failures come back as
    ``SolveStatus.FAILED`` with a detail string.
    """
    import clarabel

    options = options or SolverOptions()
    prog.validate()

    a_stack = sparse.vstack(
        [prog.eq_matrix, prog.ub_matrix, prog.soc_matrix], format="csc"
    )
    b_stack = np.concatenate([prog.eq_rhs, prog.ub_rhs, prog.soc_rhs])
    cones = []
    if prog.eq_rhs.shape[0]:
        cones.append(clarabel.ZeroConeT(prog.eq_rhs.shape[0]))
    if prog.ub_rhs.shape[0]:
        cones.append(clarabel.NonnegativeConeT(prog.ub_rhs.shape[0]))
    cones.extend(clarabel.SecondOrderConeT(q) for q in prog.soc_dims)

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = options.max_iterations
    settings.tol_feas = options.residual_tol
    settings.tol_gap_abs = options.residual_tol
    settings.tol_gap_rel = options.residual_tol

    try:
        solver = clarabel.DefaultSolver(
            sparse.csc_matrix((prog.num_vars, prog.num_vars)),
            prog.cost, a_stack, b_stack, cones, settings,
        )
        sol = solver.solve()
    except BaseException as exc:  # backend panics must not crash callers
        return SolveResult(SolveStatus.FAILED, detail=f"solver exception: {exc}")

    import clarabel as _cl
    status_map = {
        _cl.SolverStatus.Solved: SolveStatus.OPTIMAL,
        _cl.SolverStatus.AlmostSolved: SolveStatus.OPTIMAL,
        _cl.SolverStatus.PrimalInfeasible: SolveStatus.INFEASIBLE,
        _cl.SolverStatus.AlmostPrimalInfeasible: SolveStatus.INFEASIBLE,
        _cl.SolverStatus.DualInfeasible: SolveStatus.UNBOUNDED,
        _cl.SolverStatus.AlmostDualInfeasible: SolveStatus.UNBOUNDED,
    }
    status = status_map.get(sol.status, SolveStatus.FAILED)
    if status is SolveStatus.OPTIMAL:
        return SolveResult(status, x=np.asarray(sol.x), objective=float(sol.obj_val),
                           iterations=sol.iterations)
    return SolveResult(status, iterations=sol.iterations, detail=str(sol.status))
