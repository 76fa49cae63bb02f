"""Point-cloud preparation: duplicate removal, outlier filtering, ground
classification and height normalization.

Ground/non-ground separation uses a progressive morphological filter on the
minimum-elevation raster (grey opening with a growing window and a linear
elevation-difference schedule), which is the standard published equivalent
of the usual commercial tooling. The resulting ground raster (1 m cells by
default) is bilinearly interpolated for normalization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DataError
from .las_io import GROUND_CLASS, PointCloud

HEIGHT_FLOOR = -1.0


class NormalizedCloud(PointCloud):
    """Marker type: z holds height above ground instead of elevation."""


@dataclass(frozen=True)
class GroundModel:
    """Regular raster of ground elevations with bilinear interpolation.

    `values[r, c]` is the elevation at the center of the cell whose lower
    left corner sits at (origin_x + c*cell, origin_y + r*cell). Queries in
    the outer half-cell ring use constant extrapolation; queries beyond the
    raster extent raise.
    """

    origin: tuple[float, float]
    cell: float
    values: np.ndarray

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or not np.all(np.isfinite(vals)):
            raise ValueError("ground raster must be 2-D and fully finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0, x0 + self.ncols * self.cell, y0 + self.nrows * self.cell)

    def interpolate(self, x, y) -> np.ndarray:
        """Bilinear ground elevation at (x, y); raises outside the extent."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        x0, y0, x1, y1 = self.extent()
        pad = 1e-9 * max(self.cell, 1.0)
        if np.any(x < x0 - pad) or np.any(x > x1 + pad) or \
           np.any(y < y0 - pad) or np.any(y > y1 + pad):
            raise DataError("query point outside the ground model extent")
        # continuous cell-center coordinates, clamped for edge extrapolation
        cx = np.clip((x - x0) / self.cell - 0.5, 0.0, self.ncols - 1.0)
        cy = np.clip((y - y0) / self.cell - 0.5, 0.0, self.nrows - 1.0)
        c0 = np.clip(np.floor(cx).astype(int), 0, max(self.ncols - 2, 0))
        r0 = np.clip(np.floor(cy).astype(int), 0, max(self.nrows - 2, 0))
        c1 = np.minimum(c0 + 1, self.ncols - 1)
        r1 = np.minimum(r0 + 1, self.nrows - 1)
        fx = cx - c0
        fy = cy - r0
        v = self.values
        return ((1 - fx) * (1 - fy) * v[r0, c0] + fx * (1 - fy) * v[r0, c1]
                + (1 - fx) * fy * v[r1, c0] + fx * fy * v[r1, c1])


def write_grid(model: GroundModel, path) -> None:
    """Dump a GroundModel in the plain-text grid format."""
    with open(path, "w") as fh:
        fh.write(f"ncols {model.ncols}\n")
        fh.write(f"nrows {model.nrows}\n")
        fh.write(f"origin_x {model.origin[0]!r}\n")
        fh.write(f"origin_y {model.origin[1]!r}\n")
        fh.write(f"cell {model.cell!r}\n")
        for row in model.values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_grid(path) -> GroundModel:
    with open(path) as fh:
        header = {}
        for _ in range(5):
            key, value = fh.readline().split()
            header[key] = value
        try:
            ncols, nrows = int(header["ncols"]), int(header["nrows"])
            origin = (float(header["origin_x"]), float(header["origin_y"]))
            cell = float(header["cell"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: bad grid header") from exc
        values = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if values.shape != (nrows, ncols):
        raise DataError(f"{path}: grid body {values.shape} does not match header")
    return GroundModel(origin=origin, cell=cell, values=values)


def check_time_coherence(cloud: PointCloud) -> bool:
    """Sanity check: warn when GPS time stamps are not nondecreasing.

    Out-of-order stamps usually mean concatenated flight lines or a broken
    export; they are tolerated (only duplicates key on time) but worth a
    heads-up.
    """
    if cloud.gps_time is None or len(cloud) < 2:
        return True
    monotone = bool(np.all(np.diff(cloud.gps_time) >= 0))
    if not monotone:
        warnings.warn("GPS time stamps are not monotone; check flight-line "
                      "ordering", stacklevel=2)
    return monotone


def dedupe(cloud: PointCloud) -> PointCloud:
    """Drop points with identical (x, y, z, gps_time), keeping first occurrences."""
    if len(cloud) < 2:
        return cloud
    gps = cloud.gps_time if cloud.gps_time is not None else np.zeros(len(cloud))
    order = np.lexsort((gps, cloud.z, cloud.y, cloud.x))
    xs, ys, zs, ts = cloud.x[order], cloud.y[order], cloud.z[order], gps[order]
    dup = np.zeros(len(cloud), dtype=bool)
    dup[1:] = (np.diff(xs) == 0) & (np.diff(ys) == 0) & (np.diff(zs) == 0) & (np.diff(ts) == 0)
    keep = np.sort(order[~dup])  # lexsort is stable, so survivors are first occurrences
    if len(keep) == len(cloud):
        return cloud
    return cloud.subset(keep)


def remove_noise(cloud: PointCloud, k: int = 8, sigma_mult: float = 3.0,
                 isolation_ratio: float = 2.0) -> PointCloud:
    """Drop isolated points by the mean k-nearest-neighbor distance rule.

    A point is noise when its mean 3-D distance to the k nearest neighbors
    exceeds (global mean + sigma_mult * global stddev) of that statistic.
    Points within `isolation_ratio` times the median statistic are never
    dropped: on homogeneous clouds the boundary points always have slightly
    wider neighborhoods, and without the guard a regular grid would lose
    its corners. Real isolates sit far above both limits.
    """
    n = len(cloud)
    if n <= k:
        raise DataError(f"cloud of {n} points is too small for k={k} neighbor filtering")
    xyz = np.column_stack((cloud.x, cloud.y, cloud.z))
    dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    threshold = max(mean_d.mean() + sigma_mult * mean_d.std(),
                    isolation_ratio * float(np.median(mean_d)))
    keep = mean_d <= threshold
    if keep.all():
        return cloud
    return cloud.subset(keep)


def _min_raster(cloud: PointCloud, cell: float):
    x0 = np.floor(cloud.x.min() / cell) * cell
    y0 = np.floor(cloud.y.min() / cell) * cell
    cols = np.floor((cloud.x - x0) / cell).astype(int)
    rows = np.floor((cloud.y - y0) / cell).astype(int)
    ncols = cols.max() + 1
    nrows = rows.max() + 1
    grid = np.full((nrows, ncols), np.inf)
    np.minimum.at(grid, (rows, cols), cloud.z)
    return grid, (x0, y0), rows, cols


def _fill_nearest(grid: np.ndarray, hole_mask: np.ndarray) -> np.ndarray:
    if not hole_mask.any():
        return grid
    if hole_mask.all():
        raise DataError("raster has no valid cells to fill from")
    idx = ndimage.distance_transform_edt(hole_mask, return_distances=False,
                                         return_indices=True)
    return grid[tuple(idx)]


def classify_ground(cloud: PointCloud, cell: float = 1.0, max_window: float = 20.0,
                    slope: float = 0.3, dh0: float = 0.5, dh_max: float = 5.0,
                    point_tolerance: float = 0.5) -> tuple[PointCloud, GroundModel]:
    """Label ground returns (class 2) and build the ground raster.

    Runs grey openings on the min-z raster with window radii doubling from
    one cell up to `max_window` meters. The elevation threshold grows
    linearly with the window, dh = dh0 + slope * window, capped at dh_max,
    so sloped terrain survives the wide openings while off-terrain blobs
    (crowns) are cut at the small windows where dh is still tight.
    Points within `point_tolerance` of the filtered surface become ground.
    The returned GroundModel holds per-cell means of ground points, with
    empty cells filled from their nearest populated neighbor.
    """
    if not len(cloud):
        raise DataError("cannot classify an empty cloud")
    grid, origin, rows, cols = _min_raster(cloud, cell)
    holes = np.isinf(grid)
    surface = _fill_nearest(grid, holes)

    max_cells = max(int(round(max_window / cell)), 1)
    radius = 1
    while True:
        radius = min(radius, max_cells)
        size = 2 * radius + 1
        opened = ndimage.grey_opening(surface, size=(size, size), mode="nearest")
        dh = min(dh0 + slope * radius * cell, dh_max)
        surface = np.where(surface - opened > dh, opened, surface)
        if radius >= max_cells:
            break
        radius *= 2

    ground_mask = np.abs(cloud.z - surface[rows, cols]) <= point_tolerance
    if not ground_mask.any():
        raise DataError("no candidate ground points found")

    classification = np.array(cloud.classification)
    classification[ground_mask] = GROUND_CLASS
    classification[~ground_mask & (classification == GROUND_CLASS)] = 1
    labeled = cloud.with_fields(classification=classification)

    gsum = np.zeros_like(grid)
    gcount = np.zeros_like(grid)
    np.add.at(gsum, (rows[ground_mask], cols[ground_mask]), cloud.z[ground_mask])
    np.add.at(gcount, (rows[ground_mask], cols[ground_mask]), 1.0)
    with np.errstate(invalid="ignore"):
        gmean = gsum / gcount
    gmean = _fill_nearest(np.where(gcount > 0, gmean, np.inf), gcount == 0)
    model = GroundModel(origin=origin, cell=cell, values=gmean)
    return labeled, model


def normalize_heights(cloud: PointCloud, ground: GroundModel,
                      floor: float = HEIGHT_FLOOR) -> NormalizedCloud:
    """Replace z by height above the interpolated ground, clamped at `floor`."""
    heights = cloud.z - ground.interpolate(cloud.x, cloud.y)
    heights = np.maximum(heights, floor)
    normalized = cloud.with_fields(z=heights)
    return NormalizedCloud(
        x=normalized.x, y=normalized.y, z=normalized.z,
        intensity=normalized.intensity, return_number=normalized.return_number,
        number_of_returns=normalized.number_of_returns,
        classification=normalized.classification, gps_time=normalized.gps_time,
        crs_label=normalized.crs_label, scale=normalized.scale,
        offset=(normalized.offset[0], normalized.offset[1], 0.0),
    )
