"""Synthetic forest scenes with known per-tree ground truth.

The generator is a single-surface sampling model: pulses fall uniformly on
the (margin-extended) plot, hit the highest paraboloid crown surface they
intersect or else the terrain plane, and a configurable fraction of canopy
pulses also produce a second return on the ground beneath. Tree DBH follows
the fixed monotone rule DBH = 2.2 * H^1.1 cm (clamped at the 5 cm census
floor), and heights draw from hmin + (hmax - hmin) * u^skew, whose skew
power shifts mass toward small stems the way late-succession stands do.

Everything derives from the spec's single seed, so a scene is bit-identical
across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .allometry import MIN_DBH_CM, PlotInventory, TreeRecord
from .errors import DataError
from .las_io import GROUND_CLASS, PointCloud

CANOPY_CLASS = 5
DBH_RULE_COEFF = 2.2
DBH_RULE_POWER = 1.1
CROWN_OVERLAP_CAP = 8.0  # total crown area may exceed plot area at most this much


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic plot scene."""

    plot_width: float = 20.0
    plot_length: float = 50.0
    stem_density: float = 1000.0        # trees per hectare
    height_range: tuple[float, float] = (2.5, 10.0)
    height_skew: float = 2.0            # u^skew height sampling power
    crown_ratio: float = 0.25           # crown radius = ratio * height
    crown_depth_ratio: float = 0.5      # crown spans the top fraction of the stem
    ground_elevation: float = 100.0
    ground_slope: tuple[float, float] = (0.0, 0.0)
    point_density: float = 25.0         # pulses per m^2
    penetration: float = 0.3            # canopy pulses that also reach the ground
    margin: float = 4.0                 # ground apron beyond the plot rectangle
    wood_density: float = 0.6
    origin: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.plot_width <= 0 or self.plot_length <= 0:
            raise ValueError("plot dimensions must be positive")
        if self.stem_density < 0 or self.point_density <= 0:
            raise ValueError("densities must be positive (stems may be zero)")
        hmin, hmax = self.height_range
        if not 0 < hmin <= hmax:
            raise ValueError("height range must satisfy 0 < min <= max")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must be a fraction")
        if self.height_skew <= 0 or self.crown_ratio <= 0:
            raise ValueError("height skew and crown ratio must be positive")
        if not 0.0 < self.crown_depth_ratio < 1.0:
            raise ValueError("crown depth ratio must be in (0, 1)")

    @property
    def area_m2(self) -> float:
        return self.plot_width * self.plot_length

    def polygon(self) -> list[tuple[float, float]]:
        x0, y0 = self.origin
        return [(x0, y0), (x0 + self.plot_width, y0),
                (x0 + self.plot_width, y0 + self.plot_length),
                (x0, y0 + self.plot_length)]

    def ground_z(self, x, y):
        sx, sy = self.ground_slope
        return (self.ground_elevation + sx * (np.asarray(x) - self.origin[0])
                + sy * (np.asarray(y) - self.origin[1]))


def dbh_from_height(height) -> np.ndarray:
    return np.maximum(DBH_RULE_COEFF * np.asarray(height) ** DBH_RULE_POWER, MIN_DBH_CM)


def generate(spec: SceneSpec, plot_id: str = "plot") -> tuple[PointCloud, PlotInventory]:
    """Build (point cloud, inventory) for one scene."""
    rng = np.random.default_rng(spec.seed)
    x0, y0 = spec.origin
    n_trees = round(spec.stem_density * spec.area_m2 / 10_000.0)

    hmin, hmax = spec.height_range
    tx = x0 + rng.random(n_trees) * spec.plot_width
    ty = y0 + rng.random(n_trees) * spec.plot_length
    heights = hmin + (hmax - hmin) * rng.random(n_trees) ** spec.height_skew
    dbh = dbh_from_height(heights)
    crown_r = spec.crown_ratio * heights

    if n_trees and float(np.pi * (crown_r ** 2).sum()) > CROWN_OVERLAP_CAP * spec.area_m2:
        raise DataError("stem density and crown size imply implausible crown overlap")

    inventory = PlotInventory(plot_id=plot_id, area_m2=spec.area_m2)
    for d, h in zip(dbh, heights):
        inventory.trees.append(TreeRecord(species="synthetic", wood_density=spec.wood_density,
                                          dbh=float(d), height=float(h)))

    width = spec.plot_width + 2.0 * spec.margin
    length = spec.plot_length + 2.0 * spec.margin
    n_pulses = round(spec.point_density * width * length)
    px = x0 - spec.margin + rng.random(n_pulses) * width
    py = y0 - spec.margin + rng.random(n_pulses) * length

    # highest crown surface hit per pulse; crowns are downward paraboloids
    hit_h = np.full(n_pulses, -np.inf)
    crown_base = (1.0 - spec.crown_depth_ratio) * heights
    for t in range(n_trees):
        d2 = (px - tx[t]) ** 2 + (py - ty[t]) ** 2
        r2 = crown_r[t] ** 2
        inside = d2 <= r2
        if not inside.any():
            continue
        surf = heights[t] - (heights[t] - crown_base[t]) * (d2[inside] / r2)
        hit_h[inside] = np.maximum(hit_h[inside], surf)
    canopy_hit = np.isfinite(hit_h)

    ground_z = spec.ground_z(px, py)
    xs, ys, zs, rn, nr, cls = [], [], [], [], [], []

    # canopy first returns, optionally followed by a ground return
    idx = np.nonzero(canopy_hit)[0]
    punch = rng.random(idx.size) < spec.penetration
    xs.append(px[idx]); ys.append(py[idx])
    zs.append(ground_z[idx] + hit_h[idx] + rng.normal(0.0, 0.03, idx.size))
    rn.append(np.ones(idx.size)); nr.append(np.where(punch, 2, 1))
    cls.append(np.full(idx.size, CANOPY_CLASS))

    pid = idx[punch]
    xs.append(px[pid]); ys.append(py[pid])
    zs.append(ground_z[pid] + rng.normal(0.0, 0.02, pid.size))
    rn.append(np.full(pid.size, 2)); nr.append(np.full(pid.size, 2))
    cls.append(np.full(pid.size, GROUND_CLASS))

    # open-ground returns
    gid = np.nonzero(~canopy_hit)[0]
    xs.append(px[gid]); ys.append(py[gid])
    zs.append(ground_z[gid] + rng.normal(0.0, 0.02, gid.size))
    rn.append(np.ones(gid.size)); nr.append(np.ones(gid.size))
    cls.append(np.full(gid.size, GROUND_CLASS))

    # every crown apex is sampled so the scene really reaches the top heights
    if n_trees:
        xs.append(tx); ys.append(ty)
        zs.append(np.asarray(spec.ground_z(tx, ty)) + heights)
        rn.append(np.ones(n_trees)); nr.append(np.ones(n_trees))
        cls.append(np.full(n_trees, CANOPY_CLASS))

    x = np.concatenate(xs); y = np.concatenate(ys); z = np.concatenate(zs)
    classification = np.concatenate(cls).astype(np.uint8)
    intensity = np.where(
        classification == GROUND_CLASS,
        rng.normal(180.0, 25.0, x.size),
        rng.normal(110.0, 20.0, x.size),
    )
    cloud = PointCloud(
        x=x, y=y, z=z,
        intensity=np.clip(intensity, 1, 65535).astype(np.uint16),
        return_number=np.concatenate(rn).astype(np.uint8),
        number_of_returns=np.concatenate(nr).astype(np.uint8),
        classification=classification,
        gps_time=np.arange(x.size, dtype=np.float64) * 1e-4,
        offset=(math.floor(x.min()), math.floor(y.min()), math.floor(z.min())),
    )
    return cloud, inventory


def decimate(cloud: PointCloud, keep_fraction: float, seed: int = 0) -> PointCloud:
    """Seeded random thinning to a fraction of the points (order preserved)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    if keep_fraction == 1.0 or not len(cloud):
        return cloud
    n_keep = max(1, round(keep_fraction * len(cloud)))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(cloud), size=n_keep, replace=False))
    return cloud.subset(keep)


def write_truth_csv(path, inventories: list[PlotInventory]) -> None:
    """Per-tree truth table compatible with the inventory reader."""
    with open(path, "w", newline="") as fh:
        fh.write("plot_id,species,dbh_cm,height_m,rho\n")
        for inv in inventories:
            for t in inv.trees:
                fh.write(f"{inv.plot_id},{t.species},{t.dbh!r},{t.height!r},"
                         f"{t.wood_density!r}\n")
