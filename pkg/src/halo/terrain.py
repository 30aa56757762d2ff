"""Synthetic terrain and a downward-scanning ring-pattern LiDAR.

The surface-fixed frame has e1 = downrange, e2 = crossrange, e3 = altitude
up. Heightfields store node-sampled elevations on a uniform grid and are
queried bilinearly, so the ground truth surface is exactly the bilinear
interpolant (which is also what the ray caster intersects).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PointCloudParseError, SensorError
from .fileio import atomic_write_text


@dataclass
class PointCloud:
    """Unordered collection of 3-D surface points, meters."""

    points: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.points.size and not np.isfinite(self.points).all():
            raise ConfigurationError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


def accumulate(store: PointCloud, new: PointCloud) -> PointCloud:
    """Order-preserving concatenation; no deduplication."""
    if len(store) == 0:
        return PointCloud(new.points.copy())
    if len(new) == 0:
        return PointCloud(store.points.copy())
    return PointCloud(np.vstack([store.points, new.points]))


def cloud_to_text(cloud: PointCloud) -> str:
    buf = io.StringIO()
    for x, y, z in cloud.points:
        buf.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    return buf.getvalue()


def write_cloud(cloud: PointCloud, path) -> None:
    atomic_write_text(path, cloud_to_text(cloud))


def parse_cloud(text: str) -> PointCloud:
    """Parse "x y z" lines; blank lines and #-comments are allowed."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 3:
            raise PointCloudParseError(lineno, f"expected 3 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise PointCloudParseError(lineno, f"non-numeric field in {body!r}") from None
    if not rows:
        return PointCloud.empty()
    pts = np.asarray(rows)
    if not np.isfinite(pts).all():
        bad = int(np.where(~np.isfinite(pts).all(axis=1))[0][0])
        raise PointCloudParseError(bad + 1, "non-finite coordinate")
    return PointCloud(pts)


def read_cloud(path) -> PointCloud:
    with open(path) as fh:
        return parse_cloud(fh.read())


@dataclass
class HeightField:
    """Node-sampled elevation grid; heights[iy, ix] at origin + (ix, iy)*cell."""

    origin: np.ndarray   # (2,), position of node (0, 0)
    cell_size: float
    heights: np.ndarray  # (ny, nx)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.heights = np.asarray(self.heights, dtype=float)
        if self.cell_size <= 0:
            raise ConfigurationError("cell_size must be positive")
        if self.heights.ndim != 2 or min(self.heights.shape) < 2:
            raise ConfigurationError("heights must be a 2-D grid, at least 2x2")
        if not np.isfinite(self.heights).all():
            raise ConfigurationError("heights must be finite")

    @property
    def dims(self) -> tuple[int, int]:
        return self.heights.shape[1], self.heights.shape[0]  # (nx, ny)

    def height_at(self, x, y) -> np.ndarray:
        """Bilinear surface height; NaN outside the grid footprint."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ny, nx = self.heights.shape
        fx = (x - self.origin[0]) / self.cell_size
        fy = (y - self.origin[1]) / self.cell_size
        inside = (fx >= 0) & (fx <= nx - 1) & (fy >= 0) & (fy <= ny - 1)
        fx = np.clip(fx, 0, nx - 1 - 1e-12)
        fy = np.clip(fy, 0, ny - 1 - 1e-12)
        ix = np.minimum(fx.astype(int), nx - 2)
        iy = np.minimum(fy.astype(int), ny - 2)
        tx = fx - ix
        ty = fy - iy
        h = (self.heights[iy, ix] * (1 - tx) * (1 - ty)
             + self.heights[iy, ix + 1] * tx * (1 - ty)
             + self.heights[iy + 1, ix] * (1 - tx) * ty
             + self.heights[iy + 1, ix + 1] * tx * ty)
        return np.where(inside, h, np.nan)

    @property
    def min_height(self) -> float:
        return float(self.heights.min())

    @property
    def max_height(self) -> float:
        return float(self.heights.max())


def _check_range(name: str, rng: tuple[float, float]) -> tuple[float, float]:
    lo, hi = float(rng[0]), float(rng[1])
    if lo < 0 or hi < lo:
        raise ConfigurationError(f"{name} range must satisfy 0 <= lo <= hi")
    return lo, hi


@dataclass
class TerrainSpec:
    """Recipe for a deterministic synthetic landing field."""

    extent: float = 160.0            # m, square side, centered on the origin
    cell_size: float = 1.0           # m per grid cell
    slope_deg: float = 0.0           # base plane inclination about crossrange axis
    rock_count: int = 0
    rock_radius: tuple[float, float] = (1.5, 4.0)   # m
    rock_height: tuple[float, float] = (0.3, 1.2)   # m
    crater_count: int = 0
    crater_radius: tuple[float, float] = (3.0, 8.0)  # m
    crater_depth: tuple[float, float] = (0.3, 1.5)   # m
    noise_amp: float = 0.0           # m, band-limited undulation amplitude
    seed: int = 0

    def __post_init__(self):
        if self.extent <= 0 or self.cell_size <= 0:
            raise ConfigurationError("extent and cell_size must be positive")
        if self.rock_count < 0 or self.crater_count < 0:
            raise ConfigurationError("feature counts must be non-negative")
        if self.noise_amp < 0:
            raise ConfigurationError("noise_amp must be non-negative")
        self.rock_radius = _check_range("rock_radius", self.rock_radius)
        self.rock_height = _check_range("rock_height", self.rock_height)
        self.crater_radius = _check_range("crater_radius", self.crater_radius)
        self.crater_depth = _check_range("crater_depth", self.crater_depth)


def _radial_caps(xx, yy, centers, radii, amps, sign):
    """Sum of smooth cos^2 caps: sign * a * cos(pi/2 * r/R)^2 inside r < R."""
    out = np.zeros_like(xx)
    for (cx, cy), rad, amp in zip(centers, radii, amps):
        r = np.hypot(xx - cx, yy - cy)
        inside = r < rad
        if inside.any():
            cap = np.cos(0.5 * np.pi * r[inside] / rad) ** 2
            out[inside] += sign * amp * cap
    return out


def generate_terrain(spec: TerrainSpec) -> HeightField:
    """Deterministic heightfield: plane + rock caps + crater bowls + noise."""
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2.0
    n = int(round(spec.extent / spec.cell_size)) + 1
    axis = -half + spec.cell_size * np.arange(n)
    xx, yy = np.meshgrid(axis, axis)  # xx varies along columns (ix)

    h = math.tan(math.radians(spec.slope_deg)) * xx

    if spec.rock_count:
        centers = rng.uniform(-half, half, size=(spec.rock_count, 2))
        radii = rng.uniform(*spec.rock_radius, size=spec.rock_count)
        amps = rng.uniform(*spec.rock_height, size=spec.rock_count)
        h += _radial_caps(xx, yy, centers, radii, amps, +1.0)

    if spec.crater_count:
        centers = rng.uniform(-half, half, size=(spec.crater_count, 2))
        radii = rng.uniform(*spec.crater_radius, size=spec.crater_count)
        amps = rng.uniform(*spec.crater_depth, size=spec.crater_count)
        h += _radial_caps(xx, yy, centers, radii, amps, -1.0)

    if spec.noise_amp > 0:
        waves = 16
        lam = np.exp(rng.uniform(np.log(8 * spec.cell_size), np.log(spec.extent / 3.0),
                                 size=waves))
        ang = rng.uniform(0, 2 * np.pi, size=waves)
        ph = rng.uniform(0, 2 * np.pi, size=waves)
        raw = np.zeros_like(h)
        for lam_k, ang_k, ph_k in zip(lam, ang, ph):
            kx = 2 * np.pi / lam_k * math.cos(ang_k)
            ky = 2 * np.pi / lam_k * math.sin(ang_k)
            raw += np.sin(kx * xx + ky * yy + ph_k)
        peak = np.abs(raw).max()
        if peak > 0:
            h += spec.noise_amp / peak * raw

    return HeightField(origin=np.array([-half, -half]), cell_size=spec.cell_size, heights=h)


@dataclass
class LidarConfig:
    """Downward scanner: concentric rings of rays about nadir."""

    max_range: float = 500.0
    radial_fov_deg: float = 30.0
    rays_per_ring: int = 36
    rings: int = 10
    rate: int = 1  # scans per planner step

    def __post_init__(self):
        if self.max_range <= 0:
            raise ConfigurationError("max_range must be positive")
        if not (0 < self.radial_fov_deg < 90):
            raise ConfigurationError("radial FOV must lie in (0, 90) degrees")
        if self.rays_per_ring < 1 or self.rings < 1:
            raise ConfigurationError("rays_per_ring and rings must be >= 1")
        if self.rate < 1:
            raise ConfigurationError("rate must be >= 1")


def _ray_directions(cfg: LidarConfig, phase: float) -> np.ndarray:
    """Unit directions: one nadir ray plus `rings` rings of `rays_per_ring`."""
    dirs = [np.array([0.0, 0.0, -1.0])]
    fov = math.radians(cfg.radial_fov_deg)
    for i in range(1, cfg.rings + 1):
        elev = fov * i / cfg.rings
        az = phase + 2 * np.pi * np.arange(cfg.rays_per_ring) / cfg.rays_per_ring
        s, c = math.sin(elev), math.cos(elev)
        ring = np.stack([s * np.cos(az), s * np.sin(az), np.full(cfg.rays_per_ring, -c)],
                        axis=1)
        dirs.append(ring)
    return np.vstack(dirs)


def lidar_scan(field: HeightField, position: np.ndarray, cfg: LidarConfig,
               phase: float = 0.0) -> PointCloud:
    """First-hit ray cast of every ray in the scan pattern.

    `phase` rotates the ring azimuths so successive scans from a hovering
    sensor sweep new ground. Rays that exit the field footprint or exceed
    max_range return no point.
    """
    position = np.asarray(position, dtype=float)
    ground = field.height_at(position[0], position[1])
    if np.isfinite(ground) and position[2] <= ground:
        raise SensorError("sensor is on or below the terrain surface")

    dirs = _ray_directions(cfg, phase)
    dz = -dirs[:, 2]  # positive descent rate per unit ray length
    # march only through the height band actually occupied by terrain
    t_enter = np.maximum((position[2] - field.max_height) / dz, 0.0)
    t_exit = np.minimum((position[2] - field.min_height) / dz + field.cell_size,
                        cfg.max_range)
    alive = t_enter <= t_exit
    if not alive.any():
        return PointCloud.empty()
    dirs, dz = dirs[alive], dz[alive]
    t_enter, t_exit = t_enter[alive], t_exit[alive]

    step = field.cell_size / 2.0
    n_steps = int(np.ceil((t_exit - t_enter).max() / step)) + 1
    ts = t_enter[:, None] + step * np.arange(n_steps + 1)[None, :]
    ts = np.minimum(ts, t_exit[:, None])
    pts = position[None, None, :] + ts[:, :, None] * dirs[:, None, :]
    surf = field.height_at(pts[:, :, 0], pts[:, :, 1])
    below = pts[:, :, 2] <= surf  # NaN surface compares False
    hit = below.any(axis=1)
    if not hit.any():
        return PointCloud.empty()

    first = np.argmax(below[hit], axis=1)
    ts_hit = ts[hit]
    d_hit = dirs[hit]
    hi = ts_hit[np.arange(ts_hit.shape[0]), first]
    lo = np.where(first > 0, ts_hit[np.arange(ts_hit.shape[0]), np.maximum(first - 1, 0)],
                  np.maximum(hi - step, 0.0))
    for _ in range(22):  # bisect the step interval below 1e-6 m
        mid = 0.5 * (lo + hi)
        p = position[None, :] + mid[:, None] * d_hit
        below_mid = p[:, 2] <= field.height_at(p[:, 0], p[:, 1])
        hi = np.where(below_mid, mid, hi)
        lo = np.where(below_mid, lo, mid)
    p = position[None, :] + hi[:, None] * d_hit
    z = field.height_at(p[:, 0], p[:, 1])
    keep = np.isfinite(z)
    p = p[keep]
    p[:, 2] = z[keep]  # snap onto the surface
    keep2 = np.linalg.norm(p - position[None, :], axis=1) <= cfg.max_range
    return PointCloud(p[keep2])
