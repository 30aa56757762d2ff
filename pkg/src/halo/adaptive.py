"""Adaptive multi-target guidance loop.

Wires perception-derived landing sites into the deferred-decision planner:
tops the target set up to n_max, plans a trunk-and-branches tree, then
walks its branch points. At each branch point every tracked site is
refreshed against the latest terrain data, the least desirable target is
rejected (or switched to, if its score now beats everyone else's), dead
targets are removed, and the tree is re-planned from the upcoming branch
state whenever fewer than n_min targets remain. Below the cutoff altitude
the loop locks onto the best remaining target and flies its stored control
sequence to touchdown without further solver calls.

The non-adaptive variant walks a single tree with the same bookkeeping but
never re-acquires, never switches, and never re-plans.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .ddto import DdtoRequest, DdtoSolution, ddto_solve, extract_control, single_target_costs
from .errors import ConfigurationError, DdtoProbeError, GuidanceAbort, NoFeasibleTimeError, TargetInfeasibleError
from .fileio import atomic_write_text
from .sites import LandingSite
from .socp import SolveStatus
from .trajopt import (BoundaryConditions, VehicleParams, bisect_min_nodes,
                      kinematic_min_nodes, sanitize_state)


@dataclass
class AdaptiveConfig:
    """Guidance-loop tuning knobs."""

    n_min: int = 3
    n_max: int = 7
    score_weights: np.ndarray = field(default_factory=lambda: np.array([0, 0, 1.0, 0, 0]))
    r_min: float = 2.5          # m, targets narrower than this are removed
    h_cutoff: float = 65.0      # m, lock altitude
    eps: float = 0.1            # fractional cost tolerance for every target
    dt: float = 0.5             # s
    max_restarts: int = 50

    def __post_init__(self):
        self.score_weights = np.asarray(self.score_weights, dtype=float)
        if not (1 <= self.n_min <= self.n_max):
            raise ConfigurationError("need 1 <= n_min <= n_max")
        if self.r_min <= 0:
            raise ConfigurationError("r_min must be positive")
        if self.score_weights.shape != (5,):
            raise ConfigurationError("score_weights must have 5 components")
        if self.eps < 0 or self.dt <= 0:
            raise ConfigurationError("eps must be >= 0 and dt > 0")


def desirability(site: LandingSite, weights: np.ndarray) -> float:
    """Weighted sum of the site's score components."""
    return float(np.dot(np.asarray(weights, dtype=float), site.scores))


def should_remove(site: LandingSite, r_min: float) -> bool:
    """A target is dropped once its safe radius falls below the minimum."""
    return site.radius < r_min


def should_switch(candidate: LandingSite, others: list[LandingSite],
                  weights: np.ndarray) -> bool:
    """Keep the about-to-be-rejected target iff it now outscores all others."""
    if not others:
        return True
    cand = desirability(candidate, weights)
    return cand > max(desirability(o, weights) for o in others)


def should_lock(altitude: float, h_cutoff: float) -> bool:
    return altitude < h_cutoff


class Perception(Protocol):
    def acquire(self, n: int, exclude: list[LandingSite],
                vehicle_pos: np.ndarray) -> list[LandingSite]: ...

    def update_site(self, site: LandingSite, vehicle_pos: np.ndarray,
                    others: list[LandingSite]) -> LandingSite: ...


class Plant(Protocol):
    @property
    def state(self) -> np.ndarray: ...

    @property
    def time(self) -> float: ...

    def step(self, control: np.ndarray, sites: list[LandingSite]) -> np.ndarray: ...


@dataclass
class GuidanceState:
    """Loop state: where we are, what we track, what we fly."""

    z: np.ndarray
    sites: list[LandingSite] = field(default_factory=list)
    solution: DdtoSolution | None = None
    stage: int = 0
    locked: bool = False
    lock_target: int | None = None
    elapsed: float = 0.0
    restarts: int = 0


class FlightLog:
    """Per-flight record: events, commanded nodes, and radius traces."""

    def __init__(self):
        self.events: list[dict] = []
        self.times: list[float] = []
        self.states: list[np.ndarray] = []
        self.controls: list[np.ndarray] = []
        self.radius_trace: list[tuple[float, int, float]] = []
        self.touchdown_state: np.ndarray | None = None
        self.touchdown_site: LandingSite | None = None
        self.abort_reason: str | None = None

    def event(self, t: float, kind: str, **data) -> None:
        self.events.append({"t": float(t), "event": kind, **data})

    def record_node(self, t: float, state: np.ndarray, control: np.ndarray) -> None:
        self.times.append(float(t))
        self.states.append(np.asarray(state, dtype=float).copy())
        self.controls.append(np.asarray(control, dtype=float).copy())

    def record_radii(self, t: float, sites: list[LandingSite]) -> None:
        for s in sites:
            self.radius_trace.append((float(t), int(s.id), float(s.radius)))

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e["event"] == kind)

    @property
    def success_candidate(self) -> bool:
        return self.touchdown_state is not None and self.abort_reason is None

    def to_jsonl(self) -> str:
        buf = io.StringIO()
        for e in self.events:
            clean = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                     for k, v in e.items()}
            buf.write(json.dumps(clean) + "\n")
        return buf.getvalue()

    def nodes_to_csv(self, dt: float) -> str:
        buf = io.StringIO()
        buf.write("t,r1,r2,r3,v1,v2,v3,T1,T2,T3,Gamma\n")
        for t, x, u in zip(self.times, self.states, self.controls):
            gam = float(np.linalg.norm(u))
            vals = [t, *x, *u, gam]
            buf.write(",".join(f"{v:.9g}" for v in vals) + "\n")
        return buf.getvalue()


def write_flight_log(log: FlightLog, events_path, nodes_path, dt: float) -> None:
    atomic_write_text(events_path, log.to_jsonl())
    atomic_write_text(nodes_path, log.nodes_to_csv(dt))


def _fly(cmds: np.ndarray, state: GuidanceState, plant: Plant, log: FlightLog) -> None:
    for u in cmds:
        log.record_node(plant.time, plant.state, u)
        state.z = plant.step(u, state.sites)
    state.elapsed = plant.time


def _alive(sites: list[LandingSite]) -> list[LandingSite]:
    return [s for s in sites if s.alive and s.radius > 0]


def _bisect_nodes(z0: np.ndarray, terminal: np.ndarray, config: AdaptiveConfig,
                  params: VehicleParams):
    """Minimum-time bisection with a descent-sized bracket.

    Soft-landing instances sit within ~1.5x the velocity-bound time; a
    generous 2.2x (+8 node) cap keeps the largest probe small. Falls back
    to the wide default bracket before declaring a target unreachable.
    """
    bc = BoundaryConditions(z0, terminal)
    hi = int(math.ceil(2.2 * kinematic_min_nodes(bc, params, config.dt))) + 8
    try:
        return bisect_min_nodes(bc, params, config.dt, n_hi=hi)
    except NoFeasibleTimeError:
        return bisect_min_nodes(bc, params, config.dt)


def _plan_targets(state: GuidanceState, config: AdaptiveConfig, params: VehicleParams,
                  log: FlightLog, plant: Plant):
    """Bisect a node budget for every tracked site; drop unreachable ones."""
    z0 = sanitize_state(state.z, params)
    planned = []
    for s in state.sites:
        try:
            res = _bisect_nodes(z0, s.terminal_state(), config, params)
        except NoFeasibleTimeError:
            log.event(plant.time, "target_unreachable", site=s.id)
            continue
        planned.append((s, res.num_nodes, res.solution.trajectory.cost))
    state.sites = [s for s, _, _ in planned]
    return z0, planned


def _commit_single(state: GuidanceState, site: LandingSite, config: AdaptiveConfig,
                   params: VehicleParams, perception: Perception, plant: Plant,
                   log: FlightLog) -> FlightLog:
    """Degenerate path: only one target left, fly straight to it."""
    z0 = sanitize_state(state.z, params)
    try:
        res = _bisect_nodes(z0, site.terminal_state(), config, params)
    except NoFeasibleTimeError:
        log.abort_reason = "sole-target-unreachable"
        log.event(plant.time, "abort", reason=log.abort_reason, site=site.id)
        return log
    state.locked = True
    state.lock_target = site.id
    log.event(plant.time, "lock", site=site.id, mode="single-target",
              nodes=res.num_nodes)
    _fly(res.solution.trajectory.controls, state, plant, log)
    log.record_radii(plant.time, state.sites)
    log.touchdown_state = state.z.copy()
    log.touchdown_site = site
    log.event(plant.time, "touchdown", site=site.id, state=state.z)
    return log


def run_adaptive_ddto(state: GuidanceState, config: AdaptiveConfig,
                      params: VehicleParams, perception: Perception,
                      plant: Plant) -> FlightLog:
    """Full adaptive loop: re-acquires, switches, removes, re-plans, locks."""
    return _run_engine(state, config, params, perception, plant, adaptive=True)


def run_ddto_once(state: GuidanceState, config: AdaptiveConfig, params: VehicleParams,
                  perception: Perception, plant: Plant) -> FlightLog:
    """Non-adaptive control arm: one tree, fixed rejection schedule, no
    re-acquisition or re-planning; removals and locking still apply."""
    return _run_engine(state, config, params, perception, plant, adaptive=False)


def _run_engine(state: GuidanceState, config: AdaptiveConfig, params: VehicleParams,
                perception: Perception, plant: Plant, adaptive: bool) -> FlightLog:
    log = FlightLog()
    w = config.score_weights

    for cycle in range(config.max_restarts + 1):
        state.restarts = cycle
        # top up the target set (initial cycle only, unless adaptive)
        state.sites = _alive(state.sites)
        if adaptive or cycle == 0:
            need = config.n_max - len(state.sites)
            if need > 0:
                try:
                    new = perception.acquire(need, state.sites, state.z[:3])
                except GuidanceAbort as exc:
                    log.abort_reason = exc.reason
                    log.event(plant.time, "abort", reason=exc.reason)
                    return log
                state.sites.extend(new)
                log.event(plant.time, "acquire", requested=need,
                          granted=len(new), sites=[s.id for s in new])
        if not state.sites:
            log.abort_reason = "no-targets"
            log.event(plant.time, "abort", reason=log.abort_reason)
            return log
        if len(state.sites) == 1:
            return _commit_single(state, state.sites[0], config, params, perception,
                                  plant, log)

        z0, planned = _plan_targets(state, config, params, log, plant)
        if len(planned) == 0:
            log.abort_reason = "targets-unreachable"
            log.event(plant.time, "abort", reason=log.abort_reason)
            return log
        if len(planned) == 1:
            return _commit_single(state, planned[0][0], config, params, perception,
                                  plant, log)

        # least desirable first; the best-scoring target is the survivor
        order = sorted(planned, key=lambda it: desirability(it[0], w))
        ids = [s.id for s, _, _ in planned]
        rejection = [it[0].id for it in order[:-1]]
        request = DdtoRequest(
            initial_state=z0,
            target_ids=ids,
            target_states=np.vstack([s.terminal_state() for s, _, _ in planned]),
            tolerances=np.full(len(planned), config.eps),
            node_counts=np.array([n for _, n, _ in planned]),
            rejection_order=rejection,
            dt=config.dt,
            params=params,
        )
        costs = {s.id: c for s, _, c in planned}
        try:
            solution = ddto_solve(request, costs)
        except (DdtoProbeError, TargetInfeasibleError) as exc:
            log.abort_reason = "planner-failure"
            log.event(plant.time, "abort", reason=log.abort_reason, detail=str(exc))
            return log
        state.solution = solution
        log.event(plant.time, "replan", cycle=cycle, targets=ids,
                  rejection_order=rejection,
                  branch_times=[float(t) for t in solution.branch_times])

        restart = False
        for k, lam in enumerate(solution.rejection_order, start=1):
            state.stage = k
            # perception refresh for every tracked site at this branch point
            refreshed = []
            for s in state.sites:
                if s.alive and s.radius > 0:
                    s2 = perception.update_site(s, state.z[:3],
                                                [o for o in state.sites if o.id != s.id])
                else:
                    s2 = s
                refreshed.append(s2)
            state.sites = refreshed
            log.record_radii(plant.time, state.sites)

            by_id = {s.id: s for s in state.sites}
            if adaptive and lam in by_id:
                cand = by_id[lam]
                others = [s for s in state.sites if s.id != lam]
                if cand.alive and cand.radius > 0 and should_switch(cand, others, w):
                    state.sites = [cand]
                    log.event(plant.time, "switch", site=lam)
                else:
                    state.sites = others
                    log.event(plant.time, "reject", site=lam)
            elif lam in by_id:
                state.sites = [s for s in state.sites if s.id != lam]
                log.event(plant.time, "reject", site=lam)

            removed = [s.id for s in state.sites
                       if not (s.alive and s.radius > 0) or should_remove(s, config.r_min)]
            if removed:
                state.sites = [s for s in state.sites if s.id not in removed]
                log.event(plant.time, "remove", sites=removed)

            if not state.sites:
                if adaptive and cycle < config.max_restarts:
                    log.event(plant.time, "restart", reason="targets-exhausted")
                    restart = True
                    break
                log.abort_reason = "targets-exhausted"
                log.event(plant.time, "abort", reason=log.abort_reason)
                return log

            z_next = solution.branch_states[k - 1]
            tau_prev = 0.0 if k == 1 else float(solution.branch_times[k - 2])

            if should_lock(float(z_next[2]), config.h_cutoff):
                lockable = [s for s in state.sites
                            if s.id in solution.continuations[k - 1]]
                if lockable:
                    j_lock = max(lockable, key=lambda s: desirability(s, w))
                    state.locked = True
                    state.lock_target = j_lock.id
                    cmds = extract_control(
                        solution, j_lock.id, tau_prev,
                        solution.node_counts[j_lock.id] * config.dt, stage=k)
                    log.event(plant.time, "lock", site=j_lock.id,
                              altitude=float(z_next[2]), nodes=int(cmds.shape[0]))
                    _fly(cmds, state, plant, log)
                    log.record_radii(plant.time, state.sites)
                    final = next((s for s in state.sites if s.id == j_lock.id), j_lock)
                    log.touchdown_state = state.z.copy()
                    log.touchdown_site = final
                    log.event(plant.time, "touchdown", site=final.id, state=state.z)
                    return log
                # nothing lockable in this tree: replan if allowed
                if adaptive and cycle < config.max_restarts:
                    log.event(plant.time, "restart", reason="no-lockable-target")
                    restart = True
                    break
                log.abort_reason = "no-lockable-target"
                log.event(plant.time, "abort", reason=log.abort_reason)
                return log

            if adaptive and len(state.sites) < config.n_min:
                # fly this deferrable segment, then re-plan from its endpoint
                _fly(solution.trunk_segment(k), state, plant, log)
                log.event(plant.time, "restart", reason="below-n-min",
                          remaining=[s.id for s in state.sites])
                restart = True
                break

            _fly(solution.trunk_segment(k), state, plant, log)

        if restart:
            continue
        # walked every branch point without locking: terminal commitment
        stage = len(solution.rejection_order)
        lockable = [s for s in state.sites if s.id in solution.continuations[stage - 1]]
        if not lockable:
            if adaptive and cycle < config.max_restarts:
                log.event(plant.time, "restart", reason="no-terminal-target")
                continue
            log.abort_reason = "no-terminal-target"
            log.event(plant.time, "abort", reason=log.abort_reason)
            return log
        j_lock = max(lockable, key=lambda s: desirability(s, w))
        state.locked = True
        state.lock_target = j_lock.id
        tau_prev = float(solution.branch_times[-1])
        cmds = extract_control(solution, j_lock.id, tau_prev,
                               solution.node_counts[j_lock.id] * config.dt, stage=stage)
        log.event(plant.time, "lock", site=j_lock.id, mode="terminal",
                  nodes=int(cmds.shape[0]))
        _fly(cmds, state, plant, log)
        log.record_radii(plant.time, state.sites)
        final = next((s for s in state.sites if s.id == j_lock.id), j_lock)
        log.touchdown_state = state.z.copy()
        log.touchdown_site = final
        log.event(plant.time, "touchdown", site=final.id, state=state.z)
        return log

    log.abort_reason = "restart-cap"
    log.event(plant.time, "abort", reason=log.abort_reason)
    return log
