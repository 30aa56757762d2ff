"""Circular landing-site extraction and scoring from binary safety maps.

The largest inscribed circle of a safe region is read off the Euclidean
distance transform of the safe mask (the medial axis construction: skeleton
maxima are centers of maximally inscribed discs). Terrain outside the map
counts as unsafe so sites never overhang unobserved ground.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .fileio import atomic_write_text
from .mapping import HazardParams, SafetyMap, UncertaintyMap, local_safety_map
from .terrain import PointCloud


@dataclass
class DistanceSkeleton:
    """Per-cell Euclidean distance (in cells) to the nearest unsafe cell."""

    origin: np.ndarray
    cell_size: float
    distances: np.ndarray  # (ny, nx), 0 on unsafe cells

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.origin + self.cell_size * (np.array([ix, iy]) + 0.5)


@dataclass
class LandingSite:
    """Circular safe zone with its desirability score components.

    `scores` holds (density, proximity, clustering, uncertainty, size),
    each normalized to [0, 1] with larger meaning more desirable.
    """

    id: int
    center: np.ndarray          # (2,), m
    radius: float               # m
    scores: np.ndarray = field(default_factory=lambda: np.zeros(5))
    alive: bool = True
    ground_height: float = 0.0  # m, surface elevation at the center

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.scores = np.asarray(self.scores, dtype=float)
        if self.radius < 0:
            raise ConfigurationError("site radius must be non-negative")

    def terminal_state(self) -> np.ndarray:
        """Target 6-state: at the circle center on the ground, at rest."""
        return np.array([self.center[0], self.center[1], self.ground_height,
                         0.0, 0.0, 0.0])

    def overlaps(self, other: "LandingSite") -> bool:
        return float(np.linalg.norm(self.center - other.center)) < self.radius + other.radius


def medial_axis_skeleton(smap: SafetyMap) -> DistanceSkeleton:
    """Exact Euclidean distance transform with a virtual unsafe ring outside."""
    padded = np.zeros((smap.safe.shape[0] + 2, smap.safe.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = smap.safe
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    return DistanceSkeleton(origin=smap.origin, cell_size=smap.cell_size,
                            distances=dist)


def top_n_sites(skel: DistanceSkeleton, n: int,
                min_separation_factor: float = 2.0,
                id_start: int = 0) -> list[LandingSite]:
    """Greedy largest-circle extraction with non-maximum suppression.

    Repeatedly takes the global skeleton maximum as a site, then zeroes
    every cell within min_separation_factor x radius of it. Stops early
    once no positive distance remains; results come out in non-increasing
    radius order.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    work = skel.distances.copy()
    ny, nx = work.shape
    yy, xx = np.mgrid[0:ny, 0:nx]
    out: list[LandingSite] = []
    while len(out) < n:
        flat = int(np.argmax(work))
        iy, ix = divmod(flat, nx)
        d = work[iy, ix]
        if d <= 0:
            break
        center = skel.cell_center(ix, iy)
        out.append(LandingSite(id=id_start + len(out), center=center,
                               radius=float(d * skel.cell_size)))
        suppress = (xx - ix) ** 2 + (yy - iy) ** 2 <= (min_separation_factor * d) ** 2
        work[suppress] = 0.0
    return out


def refine_site(site: LandingSite, local: SafetyMap) -> LandingSite:
    """Re-extract the best inscribed circle inside the site's own footprint.

    The local map is restricted to the original circle before skeletonizing,
    so the refined radius can only shrink (never grow past the prior value)
    and the refined center stays inside the original circle.
    """
    cx, cy = local.cell_centers()
    xx, yy = np.meshgrid(cx, cy)
    inside = np.hypot(xx - site.center[0], yy - site.center[1]) <= site.radius
    restricted = SafetyMap(origin=local.origin, cell_size=local.cell_size,
                           safe=local.safe & inside, valid=local.valid & inside)
    skel = medial_axis_skeleton(restricted)
    best = top_n_sites(skel, 1, id_start=site.id)
    if not best:
        return replace(site, radius=0.0)
    hit = best[0]
    return replace(site, center=hit.center, radius=min(hit.radius, site.radius))


def local_map_for_site(store: PointCloud, site: LandingSite,
                       params: HazardParams) -> SafetyMap:
    """Fine-resolution safety map over one site's circle plus buffer."""
    return local_safety_map(store, site.center, site.radius, params)


def _density(site: LandingSite, cloud: PointCloud) -> float:
    if site.radius <= 0:
        return 0.0
    pts = cloud.points
    if pts.shape[0] == 0:
        return 0.0
    inside = np.hypot(pts[:, 0] - site.center[0], pts[:, 1] - site.center[1]) <= site.radius
    return float(inside.sum()) / (math.pi * site.radius ** 2)


def score_site(site: LandingSite, cloud: PointCloud, vehicle_pos: np.ndarray,
               others: list[LandingSite], unc: UncertaintyMap) -> np.ndarray:
    """Desirability components (density, proximity, clustering, uncertainty, size).

    Components needing a scale are normalized against the current site set
    (peer densities and radii) or the map diagonal; a degenerate normalizer
    (no peers, zero peak density) maps to the most desirable value 1.
    """
    if site.radius <= 0:
        raise ConfigurationError("can only score sites with positive radius")
    vehicle_pos = np.asarray(vehicle_pos, dtype=float)
    diag = unc.diagonal

    dens = _density(site, cloud)
    peak = max([dens] + [_density(o, cloud) for o in others]) if others else dens
    c_density = dens / peak if peak > 0 else 1.0

    site3 = np.array([site.center[0], site.center[1], site.ground_height])
    c_proximity = 1.0 - float(np.linalg.norm(vehicle_pos - site3)) / diag

    if others:
        dists = [float(np.linalg.norm(site.center - o.center)) for o in others]
        c_clustering = 1.0 - float(np.mean(dists)) / diag
    else:
        c_clustering = 1.0

    cx, cy = unc.cell_centers()
    xx, yy = np.meshgrid(cx, cy)
    inside = (np.hypot(xx - site.center[0], yy - site.center[1]) <= site.radius) & unc.valid
    if inside.any():
        c_uncertainty = 1.0 - float(np.percentile(unc.values[inside], 99))
    else:
        c_uncertainty = 1.0

    r_peak = max([site.radius] + [o.radius for o in others])
    c_size = site.radius / r_peak if r_peak > 0 else 1.0

    return np.clip(np.array([c_density, c_proximity, c_clustering,
                             c_uncertainty, c_size]), 0.0, 1.0)


def sites_to_jsonl(sites: list[LandingSite]) -> str:
    buf = io.StringIO()
    for s in sites:
        buf.write(json.dumps({
            "id": s.id,
            "center": [float(s.center[0]), float(s.center[1])],
            "radius": float(s.radius),
            "c_des": [float(v) for v in s.scores],
            "alive": bool(s.alive),
        }) + "\n")
    return buf.getvalue()


def write_sites_jsonl(sites: list[LandingSite], path) -> None:
    atomic_write_text(path, sites_to_jsonl(sites))
