"""Closed-loop landing simulation and seeded Monte Carlo campaigns.

One trial: generate a synthetic terrain, scan it with the ring-pattern
LiDAR, feed the accumulated cloud through the hazard-mapping pipeline, and
fly the guidance loop (adaptive or single-tree) on the exact discrete
plant, with every tracked landing site exposed to an independent per-step
failure probability. Campaigns run both planner arms against paired seeds
so the comparison shares terrain and failure draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptive import (AdaptiveConfig, FlightLog, GuidanceState, run_adaptive_ddto,
                       run_ddto_once)
from .errors import ConfigurationError, GuidanceAbort
from .fileio import atomic_write_text
from .mapping import HazardParams, MapRegion, coarse_pipeline
from .sites import (LandingSite, local_map_for_site, medial_axis_skeleton,
                    refine_site, score_site, top_n_sites)
from .terrain import (HeightField, LidarConfig, PointCloud, TerrainSpec, accumulate,
                      generate_terrain, lidar_scan)
from .trajopt import VehicleParams, discretize_dynamics

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def step_vehicle(state: np.ndarray, control: np.ndarray, dt: float,
                 params: VehicleParams) -> np.ndarray:
    """Exact discrete propagation, same matrices the planner constrains."""
    a_d, b_d, p_d = discretize_dynamics(params, dt)
    return a_d @ np.asarray(state, dtype=float) + b_d @ np.asarray(control, dtype=float) + p_d


def inject_failures(sites: list[LandingSite], p_fail: float, rng) -> list[LandingSite]:
    """One Bernoulli(p_fail) draw per alive site; failed sites get radius 0."""
    for s in sites:
        if s.alive and s.radius > 0 and rng.random() < p_fail:
            s.alive = False
            s.radius = 0.0
    return sites


def _keyed_uniform(entropy: tuple[int, ...], site_id: int, step: int) -> float:
    """Deterministic uniform in [0, 1) keyed by (trial, site, step).

    Keying on the site id and step index makes failure draws identical
    across planner arms wherever both arms track the same site, which is
    what makes paired-seed comparisons low-variance.
    """
    ss = np.random.SeedSequence(entropy=list(entropy), spawn_key=(site_id, step))
    return float(np.random.default_rng(ss).random())


class PerceptionSystem:
    """Terrain sensing and landing-site bookkeeping for one flight."""

    def __init__(self, field: HeightField, lidar: LidarConfig, hazard: HazardParams,
                 region: MapRegion, min_radius: float,
                 acquire_half_width: float | None = None,
                 separation_factor: float = 2.0, max_radius: float = 12.0):
        self.field = field
        self.lidar = lidar
        self.hazard = hazard
        self.region = region
        self.min_radius = min_radius
        self.acquire_half_width = acquire_half_width
        self.separation_factor = separation_factor
        self.max_radius = max_radius  # larger circles carry no landing value
        self.cloud = PointCloud.empty()
        self.scan_count = 0
        self.next_site_id = 0
        self._maps: tuple | None = None  # (safety, uncertainty, height grid)

    def scan(self, position: np.ndarray) -> int:
        """One LiDAR sweep; the ring azimuths precess scan over scan."""
        pc = lidar_scan(self.field, position, self.lidar,
                        phase=_GOLDEN_ANGLE * self.scan_count)
        self.cloud = accumulate(self.cloud, pc)
        self.scan_count += 1
        self._maps = None
        return len(pc)

    def maps(self):
        if self._maps is None:
            self._maps = coarse_pipeline(self.cloud, self.hazard, self.region)
        return self._maps

    def ground_height(self, xy: np.ndarray) -> float:
        _, _, hgrid = self.maps()
        nx, ny = hgrid.dims
        ix = int((xy[0] - hgrid.origin[0]) / hgrid.cell_size)
        iy = int((xy[1] - hgrid.origin[1]) / hgrid.cell_size)
        if 0 <= ix < nx and 0 <= iy < ny and hgrid.valid[iy, ix]:
            return float(hgrid.values[iy, ix])
        return 0.0

    def acquire(self, n: int, exclude: list[LandingSite],
                vehicle_pos: np.ndarray) -> list[LandingSite]:
        """Up to n fresh scored sites, disjoint from the tracked ones."""
        if n <= 0:
            return []
        smap, unc, _ = self.maps()
        skel = medial_axis_skeleton(smap)
        candidates = top_n_sites(skel, n + len(exclude) + 8,
                                 self.separation_factor)
        taken: list[LandingSite] = []
        for cand in candidates:
            if len(taken) >= n:
                break
            if cand.radius < self.min_radius:
                continue
            if cand.radius > self.max_radius:
                cand = replace(cand, radius=self.max_radius)
            if self.acquire_half_width is not None and \
                    np.abs(cand.center).max() > self.acquire_half_width:
                continue
            if any(cand.overlaps(o) for o in exclude if o.alive and o.radius > 0):
                continue
            if any(cand.overlaps(o) for o in taken):
                continue
            taken.append(cand)
        alive_exclude = [o for o in exclude if o.alive and o.radius > 0]
        if not taken and not alive_exclude:
            raise GuidanceAbort("no-targets-available",
                                "no acquirable site and no alive target")
        out = []
        for i, cand in enumerate(taken):
            site = replace(cand, id=self.next_site_id + i,
                           ground_height=self.ground_height(cand.center))
            peers = alive_exclude + [c for c in taken if c is not cand]
            site.scores = score_site(site, self.cloud, vehicle_pos, peers, unc)
            out.append(site)
        self.next_site_id += len(out)
        return out

    def update_site(self, site: LandingSite, vehicle_pos: np.ndarray,
                    others: list[LandingSite]) -> LandingSite:
        """Fine-map refinement, rescoring, and terminal-state recentering."""
        if not site.alive or site.radius <= 0:
            return replace(site, radius=0.0, alive=False)
        local = local_map_for_site(self.cloud, site, self.hazard)
        refined = refine_site(site, local)
        if refined.radius <= 0:
            return replace(refined, alive=False)
        _, unc, _ = self.maps()
        refined.ground_height = self.ground_height(refined.center)
        peers = [o for o in others if o.alive and o.radius > 0]
        refined.scores = score_site(refined, self.cloud, vehicle_pos, peers, unc)
        return refined


class SimPlant:
    """Exact discrete plant plus the per-step sensing/failure side effects."""

    def __init__(self, perception: PerceptionSystem, params: VehicleParams,
                 dt: float, initial_state: np.ndarray, p_fail: float,
                 failure_entropy: tuple[int, ...], scan_rate: int = 1,
                 min_scan_clearance: float = 2.0):
        self.perception = perception
        self.params = params
        self.dt = dt
        self.p_fail = p_fail
        self.failure_entropy = failure_entropy
        self.scan_rate = scan_rate
        self.min_scan_clearance = min_scan_clearance
        self._state = np.asarray(initial_state, dtype=float).copy()
        self._time = 0.0
        self.step_index = 0
        self.thrust_min = math.inf
        self.thrust_max = 0.0
        self.tilt_max_deg = 0.0
        self.failure_events: list[dict] = []

    @property
    def state(self) -> np.ndarray:
        return self._state

    @property
    def time(self) -> float:
        return self._time

    def _audit(self, u: np.ndarray) -> None:
        tn = float(np.linalg.norm(u))
        self.thrust_min = min(self.thrust_min, tn)
        self.thrust_max = max(self.thrust_max, tn)
        if tn > 0:
            tilt = math.degrees(math.acos(min(1.0, max(-1.0, u[2] / tn))))
            self.tilt_max_deg = max(self.tilt_max_deg, tilt)

    def step(self, control: np.ndarray, sites: list[LandingSite]) -> np.ndarray:
        self._audit(control)
        self._state = step_vehicle(self._state, control, self.dt, self.params)
        self._time += self.dt
        self.step_index += 1
        pos = self._state[:3]
        ground = self.perception.field.height_at(pos[0], pos[1])
        clearance = pos[2] - (float(ground) if np.isfinite(ground) else 0.0)
        if clearance > self.min_scan_clearance:
            for _ in range(self.scan_rate):
                self.perception.scan(pos)
        if self.p_fail > 0:
            for s in sites:
                if s.alive and s.radius > 0 and \
                        _keyed_uniform(self.failure_entropy, s.id, self.step_index) < self.p_fail:
                    s.alive = False
                    s.radius = 0.0
                    self.failure_events.append(
                        {"t": self._time, "event": "target_failure", "site": s.id})
        return self._state


@dataclass
class SimConfig:
    """Everything one closed-loop campaign needs."""

    terrain: TerrainSpec = field(default_factory=lambda: TerrainSpec(
        extent=160.0, cell_size=1.0, slope_deg=1.0, rock_count=200,
        rock_radius=(1.2, 3.5), rock_height=(0.6, 1.6), crater_count=12,
        crater_radius=(3.0, 7.0), crater_depth=(0.5, 1.4), noise_amp=0.05,
        seed=0))
    lidar: LidarConfig = field(default_factory=lambda: LidarConfig(
        rings=24, rays_per_ring=90))
    hazard: HazardParams = field(default_factory=lambda: HazardParams(
        coarse_cell=2.0, fine_cell=0.5))
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    initial_state: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 150.0, 0.0, 0.0, 0.0]))
    p_fail: float = 0.01
    mode: str = "adaptive"          # "adaptive" | "ddto" | "both"
    trials: int = 100
    master_seed: int = 2024
    target_half_width: float = 50.0  # m, acquisition square half-side
    initial_scans: int = 6
    separation_factor: float = 2.0

    def __post_init__(self):
        self.initial_state = np.asarray(self.initial_state, dtype=float)
        if not (0.0 <= self.p_fail <= 1.0):
            raise ConfigurationError("p_fail must lie in [0, 1]")
        if self.mode not in ("adaptive", "ddto", "both"):
            raise ConfigurationError("mode must be adaptive, ddto, or both")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.initial_state.shape != (6,):
            raise ConfigurationError("initial_state must be a 6-vector")


@dataclass
class TrialResult:
    success: bool
    effort: float                  # N*s, sum ||u|| dt over the whole flight
    touchdown_site: int | None
    diverts: int                   # switch events
    replans: int                   # planning cycles beyond the first
    abort_reason: str | None
    thrust_min: float
    thrust_max: float
    tilt_max_deg: float
    radii_monotone: bool
    touchdown_miss: float          # m, horizontal, inf if no touchdown
    touchdown_speed: float         # m/s, |vertical|, inf if no touchdown
    steps: int

    def to_dict(self) -> dict:
        return {
            "success": bool(self.success),
            "effort": float(self.effort),
            "touchdown_site": self.touchdown_site,
            "diverts": int(self.diverts),
            "replans": int(self.replans),
            "abort_reason": self.abort_reason,
            "thrust_min": float(self.thrust_min),
            "thrust_max": float(self.thrust_max),
            "tilt_max_deg": float(self.tilt_max_deg),
            "radii_monotone": bool(self.radii_monotone),
            "touchdown_miss": float(self.touchdown_miss),
            "touchdown_speed": float(self.touchdown_speed),
            "steps": int(self.steps),
        }


def _radii_monotone(trace: list[tuple[float, int, float]]) -> bool:
    last: dict[int, float] = {}
    for _, sid, r in trace:
        if sid in last and r > last[sid] + 1e-9:
            return False
        last[sid] = r
    return True


def _trial_entropy(config: SimConfig, trial: int) -> tuple[int, int, int]:
    return (int(config.master_seed), int(config.terrain.seed), int(trial))


def build_trial_world(config: SimConfig, trial: int) -> tuple[PerceptionSystem, HeightField]:
    """Deterministic per-trial terrain and a primed perception system."""
    ent = _trial_entropy(config, trial)
    terr_seed = int(np.random.SeedSequence(entropy=list(ent), spawn_key=(0,))
                    .generate_state(1)[0])
    fld = generate_terrain(replace(config.terrain, seed=terr_seed))
    half = config.terrain.extent / 2.0
    region = MapRegion(origin=np.array([-half, -half]),
                       extent=np.array([config.terrain.extent, config.terrain.extent]))
    perception = PerceptionSystem(
        fld, config.lidar, config.hazard, region,
        min_radius=config.adaptive.r_min,
        acquire_half_width=config.target_half_width,
        separation_factor=config.separation_factor)
    for _ in range(config.initial_scans):
        perception.scan(config.initial_state[:3])
    return perception, fld


def run_closed_loop(config: SimConfig, trial: int = 0,
                    mode: str | None = None,
                    return_log: bool = False):
    """One full descent; returns a TrialResult (and optionally the log)."""
    result, log, _ = run_closed_loop_full(config, trial, mode)
    if return_log:
        return result, log
    return result


def run_closed_loop_full(config: SimConfig, trial: int = 0, mode: str | None = None
                         ) -> tuple[TrialResult, FlightLog, PerceptionSystem]:
    """run_closed_loop plus the flight log and end-of-flight perception state."""
    mode = mode or config.mode
    if mode not in ("adaptive", "ddto"):
        raise ConfigurationError("run_closed_loop mode must be adaptive or ddto")
    perception, _ = build_trial_world(config, trial)
    ent = _trial_entropy(config, trial)
    plant = SimPlant(perception, config.vehicle, config.adaptive.dt,
                     config.initial_state, config.p_fail,
                     failure_entropy=ent + (1,), scan_rate=config.lidar.rate)
    state = GuidanceState(z=config.initial_state.copy())
    runner = run_adaptive_ddto if mode == "adaptive" else run_ddto_once
    log = runner(state, config.adaptive, config.vehicle, perception, plant)
    for ev in plant.failure_events:
        log.events.append(ev)
    log.events.sort(key=lambda e: e["t"])

    miss = math.inf
    speed = math.inf
    success = False
    site_id = None
    if log.success_candidate and log.touchdown_site is not None:
        site = log.touchdown_site
        site_id = site.id
        td = log.touchdown_state
        miss = float(np.linalg.norm(td[:2] - site.center))
        speed = abs(float(td[5]))
        success = bool(site.alive and site.radius > 0 and miss <= site.radius
                       and speed <= config.vehicle.v_max_vert)
    effort = config.adaptive.dt * sum(float(np.linalg.norm(u)) for u in log.controls)
    result = TrialResult(
        success=success,
        effort=effort,
        touchdown_site=site_id,
        diverts=log.count("switch"),
        replans=max(0, log.count("replan") - 1),
        abort_reason=log.abort_reason,
        thrust_min=plant.thrust_min if log.controls else 0.0,
        thrust_max=plant.thrust_max,
        tilt_max_deg=plant.tilt_max_deg,
        radii_monotone=_radii_monotone(log.radius_trace),
        touchdown_miss=miss,
        touchdown_speed=speed,
        steps=plant.step_index,
    )
    return result, log, perception


@dataclass
class ArmSummary:
    mode: str
    trials: int
    success_rate: float
    effort_mean: float            # over successful trials
    effort_std: float
    results: list[TrialResult]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "trials": self.trials,
            "success_rate": float(self.success_rate),
            "effort_mean": float(self.effort_mean),
            "effort_std": float(self.effort_std),
            "per_trial": [r.to_dict() for r in self.results],
        }


@dataclass
class McSummary:
    config_seed: int
    trials: int
    arms: dict[str, ArmSummary]
    comparison: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "master_seed": self.config_seed,
            "trials": self.trials,
            "arms": {k: v.to_dict() for k, v in sorted(self.arms.items())},
        }
        if self.comparison is not None:
            out["comparison"] = self.comparison
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _summarize(mode: str, results: list[TrialResult]) -> ArmSummary:
    n = len(results)
    wins = [r for r in results if r.success]
    efforts = np.array([r.effort for r in wins]) if wins else np.zeros(0)
    return ArmSummary(
        mode=mode,
        trials=n,
        success_rate=len(wins) / n if n else 0.0,
        effort_mean=float(efforts.mean()) if efforts.size else 0.0,
        effort_std=float(efforts.std()) if efforts.size else 0.0,
        results=results,
    )


def _run_one(args: tuple) -> tuple[int, str, TrialResult]:
    config, trial, mode = args
    return trial, mode, run_closed_loop(config, trial, mode=mode)


def run_montecarlo(config: SimConfig, progress=None,
                   workers: int | None = None) -> McSummary:
    """Seeded campaign; mode "both" runs paired arms plus a comparison block.

    Trials are independent and may run in a process pool; results are
    aggregated in trial order either way, so the summary is identical for
    any worker count.
    """
    modes = ["ddto", "adaptive"] if config.mode == "both" else [config.mode]
    jobs = [(config, trial, m) for trial in range(config.trials) for m in modes]
    outcomes: dict[tuple[int, str], TrialResult] = {}
    if workers is None:
        import os
        workers = min(os.cpu_count() or 1, config.trials)
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(workers) as pool:
            for done, (trial, m, res) in enumerate(pool.imap_unordered(_run_one, jobs)):
                outcomes[(trial, m)] = res
                if progress is not None:
                    progress(done + 1, len(jobs))
    else:
        for done, job in enumerate(jobs):
            trial, m, res = _run_one(job)
            outcomes[(trial, m)] = res
            if progress is not None:
                progress(done + 1, len(jobs))
    results = {m: [outcomes[(t, m)] for t in range(config.trials)] for m in modes}
    arms = {m: _summarize(m, results[m]) for m in modes}
    comparison = None
    if config.mode == "both":
        a, d = arms["adaptive"], arms["ddto"]
        rel = (abs(a.effort_mean - d.effort_mean) / d.effort_mean
               if d.effort_mean > 0 else 0.0)
        comparison = {
            "success_rate_gain": float(a.success_rate - d.success_rate),
            "effort_mean_delta": float(a.effort_mean - d.effort_mean),
            "effort_mean_rel_diff": float(rel),
        }
    return McSummary(config_seed=config.master_seed, trials=config.trials,
                     arms=arms, comparison=comparison)


def write_mc_summary(summary: McSummary, path) -> None:
    atomic_write_text(path, summary.to_json())
