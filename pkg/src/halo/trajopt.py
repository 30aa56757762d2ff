"""Minimum-effort powered-descent trajectory optimization.

The vehicle is a 3-DOF double integrator with an affine gravity term. The
non-convex thrust lower bound is handled by the standard lossless
relaxation: a slack `gamma` replaces the thrust magnitude in the cost and
in the magnitude/tilt constraints, with the additional cone ||u|| <= gamma.
Minimum feasible time of flight is found by bisection over the node count
at a fixed step.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NoFeasibleTimeError
from .fileio import atomic_write_text
from .socp import ConicProgram, ProgramBuilder, SolveResult, SolveStatus, SolverOptions, solve_conic

GRAVITY = 9.81  # m/s^2, magnitude of the default gravity vector


@dataclass
class VehicleParams:
    """Point-mass vehicle model and path-constraint bounds."""

    mass: float = 1.0                # kg
    t_min: float = 3.34              # N, thrust magnitude lower bound
    t_max: float = 16.72             # N, thrust magnitude upper bound
    tilt_max_deg: float = 5.0        # deg, max thrust angle from vertical
    v_max_lat: float = 5.0           # m/s
    v_max_vert: float = 5.0          # m/s
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.mass <= 0:
            raise ConfigurationError("mass must be positive")
        if not (0 < self.t_min <= self.t_max):
            raise ConfigurationError("thrust bounds must satisfy 0 < t_min <= t_max")
        if not (0 < self.tilt_max_deg < 90):
            raise ConfigurationError("tilt bound must lie in (0, 90) degrees")
        if self.v_max_lat <= 0 or self.v_max_vert <= 0:
            raise ConfigurationError("velocity bounds must be positive")
        if self.gravity.shape != (3,):
            raise ConfigurationError("gravity must be a 3-vector")
        hover = self.mass * float(np.linalg.norm(self.gravity))
        if not (self.t_min <= hover <= self.t_max):
            raise ConfigurationError(
                f"hover thrust {hover:.3f} N outside [{self.t_min}, {self.t_max}]"
            )

    @property
    def tilt_max_rad(self) -> float:
        return math.radians(self.tilt_max_deg)


@dataclass
class BoundaryConditions:
    """Initial and terminal 6-state (position, velocity)."""

    x0: np.ndarray
    xf: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.xf = np.asarray(self.xf, dtype=float)
        if self.x0.shape != (6,) or self.xf.shape != (6,):
            raise ConfigurationError("boundary states must be 6-vectors")
        if not (np.isfinite(self.x0).all() and np.isfinite(self.xf).all()):
            raise ConfigurationError("boundary states must be finite")


@dataclass
class DiscreteTrajectory:
    """Solved descent: N control nodes, N+1 states on a uniform time grid."""

    num_nodes: int
    dt: float
    states: np.ndarray    # (N+1, 6)
    controls: np.ndarray  # (N, 3), thrust in N
    gamma: np.ndarray     # (N,), slack magnitudes in N
    cost: float           # N*s, sum_k gamma_k * dt

    @property
    def time_of_flight(self) -> float:
        return self.num_nodes * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.num_nodes + 1) * self.dt


def discretize_dynamics(params: VehicleParams, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact zero-order-hold matrices (A_d, B_d, p_d) for the double integrator."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    a_d = np.eye(6)
    a_d[:3, 3:] = dt * np.eye(3)
    b_d = np.vstack([dt * dt / (2.0 * params.mass) * np.eye(3), dt / params.mass * np.eye(3)])
    p_d = np.concatenate([params.gravity * dt * dt / 2.0, params.gravity * dt])
    return a_d, b_d, p_d


class _Layout:
    """Variable offsets for one descent block of N nodes."""

    def __init__(self, num_nodes: int, base: int = 0):
        self.n = num_nodes
        self.base = base
        self.off_x = base
        self.off_u = base + 6 * (num_nodes + 1)
        self.off_g = self.off_u + 3 * num_nodes
        self.size = 10 * num_nodes + 6

    def x(self, k: int) -> np.ndarray:
        return np.arange(self.off_x + 6 * k, self.off_x + 6 * k + 6)

    def u(self, k: int) -> np.ndarray:
        return np.arange(self.off_u + 3 * k, self.off_u + 3 * k + 3)

    def g(self, k: int) -> int:
        return self.off_g + k


def _append_descent_block(builder: ProgramBuilder, lay: _Layout, params: VehicleParams,
                          dt: float, tag: str = "") -> None:
    """All dynamics and path constraints for one block (boundary rows excluded)."""
    n = lay.n
    pre = f"{tag}/" if tag else ""
    p_d = discretize_dynamics(params, dt)[2]
    m = params.mass
    k6 = np.repeat(np.arange(n), 6)
    r6 = np.tile(np.arange(6), n)
    k3 = np.repeat(np.arange(n), 3)
    r3 = np.tile(np.arange(3), n)

    # dynamics: x_{k+1} - A_d x_k - B_d u_k = p_d
    rows = np.concatenate([6 * k6 + r6, 6 * k6 + r6, 6 * k3 + r3, 6 * k3 + r3, 6 * k3 + r3 + 3])
    cols = np.concatenate([
        lay.off_x + 6 * (k6 + 1) + r6,            # +x_{k+1}
        lay.off_x + 6 * k6 + r6,                  # -x_k (identity part)
        lay.off_x + 6 * k3 + r3 + 3,              # -dt * v_k in position rows
        lay.off_u + 3 * k3 + r3,                  # -dt^2/2m * u_k in position rows
        lay.off_u + 3 * k3 + r3,                  # -dt/m * u_k in velocity rows
    ])
    vals = np.concatenate([
        np.ones(6 * n), -np.ones(6 * n), np.full(3 * n, -dt),
        np.full(3 * n, -dt * dt / (2 * m)), np.full(3 * n, -dt / m),
    ])
    builder.add_equalities(rows, cols, vals, np.tile(p_d, n), group=pre + "dynamics")

    ks = np.arange(n)
    g_cols = lay.off_g + ks

    # slack magnitude bounds: t_min <= gamma_k <= t_max
    rows = np.arange(2 * n)
    cols = np.concatenate([g_cols, g_cols])
    vals = np.concatenate([-np.ones(n), np.ones(n)])
    rhs = np.concatenate([np.full(n, -params.t_min), np.full(n, params.t_max)])
    builder.add_upper_bounds(rows, cols, vals, rhs, group=pre + "gamma_bounds")

    # tilt: gamma_k cos(tilt_max) - u_k,z <= 0
    cos_t = math.cos(params.tilt_max_rad)
    rows = np.concatenate([ks, ks])
    cols = np.concatenate([g_cols, lay.off_u + 3 * ks + 2])
    vals = np.concatenate([np.full(n, cos_t), -np.ones(n)])
    builder.add_upper_bounds(rows, cols, vals, np.zeros(n), group=pre + "tilt")

    # vertical velocity bound at every state node
    kn = np.arange(n + 1)
    vz_cols = lay.off_x + 6 * kn + 5
    rows = np.arange(2 * (n + 1))
    cols = np.concatenate([vz_cols, vz_cols])
    vals = np.concatenate([np.ones(n + 1), -np.ones(n + 1)])
    builder.add_upper_bounds(rows, cols, vals, np.full(2 * (n + 1), params.v_max_vert),
                             group=pre + "vert_velocity")

    # thrust cones ||u_k|| <= gamma_k, one SOC(4) per control node
    b4 = np.repeat(4 * ks, 4) + np.tile(np.arange(4), n)
    cols = np.empty(4 * n, dtype=np.intp)
    cols[0::4] = g_cols
    cols[1::4] = lay.off_u + 3 * ks
    cols[2::4] = lay.off_u + 3 * ks + 1
    cols[3::4] = lay.off_u + 3 * ks + 2
    builder.add_soc_batch(b4, cols, -np.ones(4 * n), np.zeros(4 * n), [4] * n,
                          group=pre + "thrust_cone")

    # lateral velocity cones ||v_xy|| <= v_max_lat, one SOC(3) per state node
    rows = np.concatenate([3 * kn + 1, 3 * kn + 2])
    cols = np.concatenate([lay.off_x + 6 * kn + 3, lay.off_x + 6 * kn + 4])
    rhs = np.zeros(3 * (n + 1))
    rhs[0::3] = params.v_max_lat
    builder.add_soc_batch(rows, cols, -np.ones(2 * (n + 1)), rhs, [3] * (n + 1),
                          group=pre + "lat_velocity")

    # cost: sum gamma_k * dt
    builder.add_cost(g_cols, np.full(n, dt))


def build_lcvx(bc: BoundaryConditions, params: VehicleParams, num_nodes: int,
               dt: float) -> ConicProgram:
    """Assemble the relaxed minimum-effort descent program for N nodes."""
    if num_nodes < 2:
        raise ConfigurationError("need at least 2 nodes")
    lay = _Layout(num_nodes)
    builder = ProgramBuilder(lay.size)
    _append_descent_block(builder, lay, params, dt)
    rows = np.arange(12)
    cols = np.concatenate([lay.x(0), lay.x(num_nodes)])
    builder.add_equalities(rows, cols, np.ones(12), np.concatenate([bc.x0, bc.xf]),
                           group="boundary")
    return builder.build()


@dataclass
class LcvxSolution:
    status: SolveStatus
    trajectory: DiscreteTrajectory | None = None
    solver: SolveResult | None = None


def solve_lcvx(bc: BoundaryConditions, params: VehicleParams, num_nodes: int, dt: float,
               options: SolverOptions | None = None) -> LcvxSolution:
    prog = build_lcvx(bc, params, num_nodes, dt)
    res = solve_conic(prog, options)
    if res.status is not SolveStatus.OPTIMAL:
        return LcvxSolution(res.status, solver=res)
    lay = _Layout(num_nodes)
    x = res.x
    traj = DiscreteTrajectory(
        num_nodes=num_nodes,
        dt=dt,
        states=x[lay.off_x:lay.off_u].reshape(num_nodes + 1, 6).copy(),
        controls=x[lay.off_u:lay.off_g].reshape(num_nodes, 3).copy(),
        gamma=x[lay.off_g:lay.off_g + num_nodes].copy(),
        cost=float(res.objective),
    )
    return LcvxSolution(SolveStatus.OPTIMAL, trajectory=traj, solver=res)


@dataclass
class AuditReport:
    """Worst-case constraint violations, recomputed from the raw trajectory."""

    thrust_lower: float
    thrust_upper: float
    tilt: float
    lat_velocity: float
    vert_velocity: float
    dynamics_defect: float
    boundary_defect: float
    lossless_gap: float

    def max_path_violation(self) -> float:
        return max(self.thrust_lower, self.thrust_upper, self.tilt,
                   self.lat_velocity, self.vert_velocity)

    def ok(self, tol: float = 1e-6, dyn_tol: float = 1e-7) -> bool:
        return self.max_path_violation() <= tol and self.dynamics_defect <= dyn_tol \
            and self.boundary_defect <= tol


def audit_trajectory(traj: DiscreteTrajectory, params: VehicleParams,
                     bc: BoundaryConditions | None = None) -> AuditReport:
    """Re-evaluate every path constraint independently of the solver matrices."""
    u = traj.controls
    x = traj.states
    tnorm = np.linalg.norm(u, axis=1)
    cos_t = math.cos(params.tilt_max_rad)
    # exact recursion, written out rather than reusing the assembled program
    dt, m, g = traj.dt, params.mass, params.gravity
    pos_next = x[:-1, :3] + x[:-1, 3:] * dt + (u / m + g) * dt * dt / 2.0
    vel_next = x[:-1, 3:] + (u / m + g) * dt
    defect = np.max(np.abs(np.hstack([pos_next, vel_next]) - x[1:]))
    boundary = 0.0
    if bc is not None:
        boundary = max(np.max(np.abs(x[0] - bc.x0)), np.max(np.abs(x[-1] - bc.xf)))
    return AuditReport(
        thrust_lower=float(np.max(params.t_min - tnorm, initial=0.0)),
        thrust_upper=float(np.max(tnorm - params.t_max, initial=0.0)),
        tilt=float(np.max(tnorm * cos_t - u[:, 2], initial=0.0)),
        lat_velocity=float(np.max(np.linalg.norm(x[:, 3:5], axis=1) - params.v_max_lat,
                                  initial=0.0)),
        vert_velocity=float(np.max(np.abs(x[:, 5]) - params.v_max_vert, initial=0.0)),
        dynamics_defect=float(defect),
        boundary_defect=float(boundary),
        lossless_gap=float(np.max(traj.gamma - tnorm, initial=0.0)),
    )


def sanitize_state(state: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Project a measured state's velocity back inside the path bounds.

    Replanning from a propagated state can inherit solver-level bound
    violations (~1e-9) that would make the pinned initial condition
    infeasible; this clips them away without touching genuine values.
    """
    out = np.asarray(state, dtype=float).copy()
    out[5] = np.clip(out[5], -params.v_max_vert, params.v_max_vert)
    lat = float(np.linalg.norm(out[3:5]))
    if lat > params.v_max_lat:
        out[3:5] *= params.v_max_lat / lat
    return out


def kinematic_min_nodes(bc: BoundaryConditions, params: VehicleParams, dt: float) -> int:
    """Node count implied by the velocity bounds alone (necessary, not sufficient)."""
    dz = abs(bc.xf[2] - bc.x0[2])
    dxy = float(np.linalg.norm(bc.xf[:2] - bc.x0[:2]))
    t_req = max(dz / params.v_max_vert, dxy / params.v_max_lat)
    return max(2, math.ceil(t_req / dt))


@dataclass
class BisectResult:
    num_nodes: int
    solution: LcvxSolution
    probes: dict[int, SolveStatus]

    @property
    def time_of_flight(self) -> float:
        return self.solution.trajectory.time_of_flight


def bisect_min_nodes(bc: BoundaryConditions, params: VehicleParams, dt: float,
                     n_lo: int = 2, n_hi: int | None = None,
                     options: SolverOptions | None = None) -> BisectResult:
    """Smallest node count in [n_lo, n_hi] with a feasible descent.

    Assumes feasibility is monotone in the node count above the first
    feasible value. The bracket invariant guarantees the returned N has
    N-1 infeasible whenever N > n_lo.
    """
    if n_lo < 2:
        raise ConfigurationError("n_lo must be at least 2")
    if n_hi is None:
        n_hi = 4 * kinematic_min_nodes(bc, params, dt)
    if n_hi < n_lo:
        raise ConfigurationError("empty bisection bracket")

    cache: dict[int, LcvxSolution] = {}

    def attempt(n: int) -> LcvxSolution:
        if n not in cache:
            cache[n] = solve_lcvx(bc, params, n, dt, options)
        return cache[n]

    if attempt(n_lo).status is SolveStatus.OPTIMAL:
        return BisectResult(n_lo, cache[n_lo], {k: v.status for k, v in cache.items()})
    if attempt(n_hi).status is not SolveStatus.OPTIMAL:
        raise NoFeasibleTimeError(
            f"no feasible node count in [{n_lo}, {n_hi}] "
            f"(N={n_hi}: {cache[n_hi].status.value})"
        )
    lo, hi = n_lo, n_hi  # invariant: lo infeasible, hi feasible
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if attempt(mid).status is SolveStatus.OPTIMAL:
            hi = mid
        else:
            lo = mid
    return BisectResult(hi, cache[hi], {k: v.status for k, v in cache.items()})


def trajectory_to_csv(traj: DiscreteTrajectory) -> str:
    """CSV text with columns t, r1..r3, v1..v3, T1..T3, Gamma."""
    buf = io.StringIO()
    buf.write("t,r1,r2,r3,v1,v2,v3,T1,T2,T3,Gamma\n")
    for k in range(traj.num_nodes + 1):
        row = [k * traj.dt, *traj.states[k]]
        if k < traj.num_nodes:
            row += [*traj.controls[k], traj.gamma[k]]
        else:
            row += [math.nan] * 4
        buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
    return buf.getvalue()


def write_trajectory_csv(traj: DiscreteTrajectory, path) -> None:
    atomic_write_text(path, trajectory_to_csv(traj))
