"""Raster hazard mapping from accumulated point clouds.

Pipeline, coarse (whole observed area) and fine (per landing region):
roughness-preserving downsample -> piecewise-linear height interpolation ->
surface normals -> inclination angles -> safe/unsafe thresholding. The
coarse map additionally carries a normalized local-dispersion uncertainty
channel that is ANDed into the safety verdict.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import QhullError

from .errors import ConfigurationError
from .fileio import atomic_write_text
from .terrain import PointCloud


@dataclass
class ScalarGrid:
    """Georeferenced raster; values[iy, ix] at the center of cell (ix, iy)."""

    origin: np.ndarray    # (2,), corner of cell (0, 0)
    cell_size: float
    values: np.ndarray    # (ny, nx)
    valid: np.ndarray     # (ny, nx) bool

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.cell_size <= 0:
            raise ConfigurationError("cell_size must be positive")
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ConfigurationError("values/valid shape mismatch")

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[0]  # (nx, ny)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.dims
        cx = self.origin[0] + self.cell_size * (np.arange(nx) + 0.5)
        cy = self.origin[1] + self.cell_size * (np.arange(ny) + 0.5)
        return cx, cy

    @property
    def diagonal(self) -> float:
        nx, ny = self.dims
        return self.cell_size * math.hypot(nx, ny)


@dataclass
class NormalMap:
    origin: np.ndarray
    cell_size: float
    vectors: np.ndarray   # (ny, nx, 3) unit normals, e3 component >= 0
    valid: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)


class AngleMap(ScalarGrid):
    """Per-cell surface inclination from vertical, degrees."""


class UncertaintyMap(ScalarGrid):
    """Per-cell normalized prediction dispersion in [0, 1]."""


@dataclass
class SafetyMap:
    origin: np.ndarray
    cell_size: float
    safe: np.ndarray      # (ny, nx) bool; invalid cells are unsafe
    valid: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.safe = np.asarray(self.safe, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def dims(self) -> tuple[int, int]:
        return self.safe.shape[1], self.safe.shape[0]

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.dims
        cx = self.origin[0] + self.cell_size * (np.arange(nx) + 0.5)
        cy = self.origin[1] + self.cell_size * (np.arange(ny) + 0.5)
        return cx, cy

    @property
    def diagonal(self) -> float:
        nx, ny = self.dims
        return self.cell_size * math.hypot(nx, ny)


@dataclass
class HazardParams:
    """Classification thresholds and raster resolutions."""

    max_inclination_deg: float = 8.0
    variance_threshold: float = 0.9    # normalized dispersion above this is unsafe
    coarse_cell: float = 4.0           # m
    fine_cell: float = 1.0             # m
    local_buffer: float = 2.0          # m beyond a site radius for fine analysis

    def __post_init__(self):
        if not (0 < self.max_inclination_deg < 90):
            raise ConfigurationError("max inclination must lie in (0, 90) degrees")
        if not (0 < self.variance_threshold <= 1):
            raise ConfigurationError("variance threshold must lie in (0, 1]")
        if self.coarse_cell <= 0 or self.fine_cell <= 0:
            raise ConfigurationError("cell sizes must be positive")
        if self.fine_cell >= self.coarse_cell:
            raise ConfigurationError("fine cell must be smaller than coarse cell")
        if self.local_buffer < 0:
            raise ConfigurationError("local buffer must be non-negative")


@dataclass
class MapRegion:
    """Axis-aligned raster footprint: origin corner plus extent in meters."""

    origin: np.ndarray  # (2,)
    extent: np.ndarray  # (2,)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.extent = np.asarray(self.extent, dtype=float)
        if (self.extent <= 0).any():
            raise ConfigurationError("region extent must be positive")

    def grid_dims(self, cell_size: float) -> tuple[int, int]:
        return (max(2, int(round(self.extent[0] / cell_size))),
                max(2, int(round(self.extent[1] / cell_size))))


def downsample_roughness_preserving(cloud: PointCloud, cell_size: float) -> PointCloud:
    """Keep only the min-Z and max-Z point of every occupied grid cell.

    Extremes are the conservative summary of a cell: they preserve the
    roughness that interpolation would otherwise smooth away.
    """
    if cell_size <= 0:
        raise ConfigurationError("cell_size must be positive")
    pts = cloud.points
    if pts.shape[0] == 0:
        return PointCloud.empty()
    ix = np.floor(pts[:, 0] / cell_size).astype(np.int64)
    iy = np.floor(pts[:, 1] / cell_size).astype(np.int64)
    # collapse the 2-D bin index to one key; shift to keep keys non-negative
    key = (ix - ix.min()) * (np.int64(iy.max() - iy.min()) + 1) + (iy - iy.min())
    order = np.lexsort((pts[:, 2], key))
    key_sorted = key[order]
    starts = np.flatnonzero(np.r_[True, key_sorted[1:] != key_sorted[:-1]])
    ends = np.r_[starts[1:], key_sorted.shape[0]] - 1
    keep_min = order[starts]
    keep_max = order[ends]
    single = keep_min == keep_max
    keep = np.concatenate([keep_min, keep_max[~single]])
    return PointCloud(pts[np.sort(keep)])


def interpolate_height_grid(cloud: PointCloud, origin, cell_size: float,
                            dims: tuple[int, int]) -> ScalarGrid:
    """Piecewise-linear surface fit sampled at cell centers.

    Uses the Delaunay triangulation of the (x, y) projections; cells
    outside the convex hull are masked invalid. Degenerate clouds (fewer
    than 3 points, or all collinear) yield an all-invalid grid.
    """
    nx, ny = dims
    origin = np.asarray(origin, dtype=float)
    values = np.full((ny, nx), np.nan)
    pts = cloud.points
    if pts.shape[0] >= 3:
        try:
            interp = LinearNDInterpolator(pts[:, :2], pts[:, 2])
            cx = origin[0] + cell_size * (np.arange(nx) + 0.5)
            cy = origin[1] + cell_size * (np.arange(ny) + 0.5)
            xx, yy = np.meshgrid(cx, cy)
            values = interp(xx, yy)
        except QhullError:
            pass
    return ScalarGrid(origin=origin, cell_size=cell_size, values=values,
                      valid=np.isfinite(values))


def surface_normals(grid: ScalarGrid) -> NormalMap:
    """Unit surface normals from central-difference height gradients.

    One-sided differences apply at the raster border; cells whose stencil
    touches an invalid neighbor come out invalid.
    """
    h = np.where(grid.valid, grid.values, np.nan)
    gy, gx = np.gradient(h, grid.cell_size)
    nz = np.ones_like(h)
    vec = np.stack([-gx, -gy, nz], axis=-1)
    norm = np.linalg.norm(vec, axis=-1)
    valid = np.isfinite(norm) & grid.valid
    with np.errstate(invalid="ignore"):
        vec = vec / norm[..., None]
    vec[~valid] = np.nan
    return NormalMap(origin=grid.origin, cell_size=grid.cell_size, vectors=vec,
                     valid=valid)


def angle_map(normals: NormalMap) -> AngleMap:
    """Inclination = angle between the cell normal and straight up, degrees."""
    nz = normals.vectors[..., 2]
    with np.errstate(invalid="ignore"):
        theta = np.degrees(np.arccos(np.clip(nz, -1.0, 1.0)))
    return AngleMap(origin=normals.origin, cell_size=normals.cell_size,
                    values=theta, valid=normals.valid & np.isfinite(theta))


def threshold_safety(angles: AngleMap, max_inclination_deg: float) -> SafetyMap:
    """Safe iff valid and inclination does not exceed the bound (strict >)."""
    safe = angles.valid & (angles.values <= max_inclination_deg)
    return SafetyMap(origin=angles.origin, cell_size=angles.cell_size,
                     safe=safe, valid=angles.valid.copy())


def local_angle_dispersion(angles: AngleMap) -> UncertaintyMap:
    """Std-dev of inclination over each 3x3 neighborhood, normalized to [0, 1].

    Stands in for an ensemble prediction variance: cells where the fitted
    surface is locally inconsistent are the ones a classifier would be
    unsure about. An all-equal map normalizes to zero.
    """
    # shift by the map mean: dispersion is shift-invariant, and the raw
    # sum-of-squares formula loses ~8 digits when mean >> std
    shift = float(np.mean(angles.values[angles.valid])) if angles.valid.any() else 0.0
    vals = np.where(angles.valid, angles.values - shift, 0.0)
    mask = angles.valid.astype(float)
    s = np.zeros_like(vals)
    s2 = np.zeros_like(vals)
    cnt = np.zeros_like(vals)
    ny, nx = vals.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys = slice(max(0, dy), ny + min(0, dy))
            xs = slice(max(0, dx), nx + min(0, dx))
            yd = slice(max(0, -dy), ny + min(0, -dy))
            xd = slice(max(0, -dx), nx + min(0, -dx))
            s[yd, xd] += vals[ys, xs] * mask[ys, xs]
            s2[yd, xd] += vals[ys, xs] ** 2 * mask[ys, xs]
            cnt[yd, xd] += mask[ys, xs]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / cnt
        var = np.maximum(s2 / cnt - mean ** 2, 0.0)
    std = np.sqrt(var)
    std[~angles.valid | (cnt == 0)] = 0.0
    peak = std.max() if std.size else 0.0
    # a map-wide dispersion at rounding-noise level means "no uncertainty";
    # normalizing by it would amplify numerical dust to full scale
    u = std / peak if peak > 1e-9 else np.zeros_like(std)
    return UncertaintyMap(origin=angles.origin, cell_size=angles.cell_size,
                          values=u, valid=angles.valid.copy())


def coarse_pipeline(cloud: PointCloud, params: HazardParams,
                    region: MapRegion) -> tuple[SafetyMap, UncertaintyMap, ScalarGrid]:
    """Coarse classification, returning the height grid it interpolated."""
    dims = region.grid_dims(params.coarse_cell)
    culled = downsample_roughness_preserving(cloud, params.coarse_cell)
    grid = interpolate_height_grid(culled, region.origin, params.coarse_cell, dims)
    normals = surface_normals(grid)
    angles = angle_map(normals)
    geo = threshold_safety(angles, params.max_inclination_deg)
    unc = local_angle_dispersion(angles)
    safe = geo.safe & (unc.values <= params.variance_threshold)
    return (SafetyMap(origin=geo.origin, cell_size=geo.cell_size, safe=safe,
                      valid=geo.valid),
            unc, grid)


def coarse_safety_map(cloud: PointCloud, params: HazardParams,
                      region: MapRegion) -> tuple[SafetyMap, UncertaintyMap]:
    """Whole-area hazard classification with the uncertainty channel ANDed in."""
    smap, unc, _ = coarse_pipeline(cloud, params, region)
    return smap, unc


def local_safety_map(store: PointCloud, center, radius: float,
                     params: HazardParams) -> SafetyMap:
    """High-resolution classification of one circular landing region.

    Selects the sub-cloud within radius + buffer of the center, downsamples
    it independently at the fine cell size, and reruns the geometric
    pipeline. A too-sparse sub-cloud yields an all-unsafe map.
    """
    if radius <= 0:
        raise ConfigurationError("site radius must be positive")
    center = np.asarray(center, dtype=float)
    reach = radius + params.local_buffer
    pts = store.points
    if pts.shape[0]:
        near = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1]) <= reach
        sub = PointCloud(pts[near])
    else:
        sub = PointCloud.empty()
    region = MapRegion(origin=center - reach, extent=np.array([2 * reach, 2 * reach]))
    dims = region.grid_dims(params.fine_cell)
    culled = downsample_roughness_preserving(sub, params.fine_cell)
    grid = interpolate_height_grid(culled, region.origin, params.fine_cell, dims)
    normals = surface_normals(grid)
    angles = angle_map(normals)
    return threshold_safety(angles, params.max_inclination_deg)


def safety_to_pgm(smap: SafetyMap) -> str:
    """ASCII PGM, 255 = safe, 0 = unsafe; rows top-down in +y order."""
    nx, ny = smap.dims
    lines = [f"P2\n{nx} {ny}\n255\n"]
    img = np.where(smap.safe, 255, 0)
    for iy in range(ny - 1, -1, -1):
        lines.append(" ".join(str(v) for v in img[iy]) + "\n")
    return "".join(lines)


def grid_to_pgm(grid: ScalarGrid, lo: float = 0.0, hi: float = 1.0) -> str:
    """ASCII PGM of a scalar layer linearly mapped from [lo, hi] to 0..255."""
    nx, ny = grid.dims
    span = hi - lo if hi > lo else 1.0
    img = np.clip((grid.values - lo) / span, 0.0, 1.0)
    img = np.where(grid.valid, np.round(img * 255), 0).astype(int)
    lines = [f"P2\n{nx} {ny}\n255\n"]
    for iy in range(ny - 1, -1, -1):
        lines.append(" ".join(str(v) for v in img[iy]) + "\n")
    return "".join(lines)


def grid_to_csv(grid: ScalarGrid) -> str:
    """Row-major CSV with a 3-line header: origin, cell size, dims."""
    nx, ny = grid.dims
    buf = io.StringIO()
    buf.write(f"# origin,{grid.origin[0]:.9g},{grid.origin[1]:.9g}\n")
    buf.write(f"# cell_size,{grid.cell_size:.9g}\n")
    buf.write(f"# dims,{nx},{ny}\n")
    vals = np.where(grid.valid, grid.values, np.nan)
    for iy in range(ny):
        buf.write(",".join(f"{v:.9g}" for v in vals[iy]) + "\n")
    return buf.getvalue()


def write_safety_pgm(smap: SafetyMap, path) -> None:
    atomic_write_text(path, safety_to_pgm(smap))


def write_grid_pgm(grid: ScalarGrid, path, lo: float = 0.0, hi: float = 1.0) -> None:
    atomic_write_text(path, grid_to_pgm(grid, lo, hi))


def write_grid_csv(grid: ScalarGrid, path) -> None:
    atomic_write_text(path, grid_to_csv(grid))
