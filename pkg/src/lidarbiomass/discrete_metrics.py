"""Per-plot statistics of a normalized point cloud, for the elevation and
intensity channels: order statistics, moments, L-moments, percentiles,
canopy relief ratio and generalized means.

Conventions are pinned so results are bit-stable across runs:

* percentiles use linear interpolation at rank p/100 * (n - 1);
* stddev/variance use the n-1 (sample) denominator, skewness/kurtosis the
  plain moment estimators with n denominators (kurtosis not excess);
* the height mode is found on 0.5 m bins whose first bin is centered at the
  sample minimum, ties toward the lower bin; the intensity mode uses raw
  integer values. Binning is anchored to the minimum so that translating
  the data translates the mode with it.

Statistics that are undefined for a sample (CV with zero mean, skewness of
a constant sample, ...) come back as NaN and are listed in
``MetricVector.undefined`` rather than poisoning downstream math silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .preprocess import NormalizedCloud

PERCENTILE_LEVELS = (1, 5, 10, 20, 25, 30, 40, 50, 60, 70, 75, 80, 90, 95, 99)
HEIGHT_CUTOFF = 1.37  # breast height; separates canopy from ground/understory
MODE_BIN_HEIGHT = 0.5
MAX_RETURN_COUNTED = 9


@dataclass
class MetricVector:
    """Named metric values for one plot from one sensing system."""

    plot_id: str
    system: str
    values: dict[str, float]
    undefined: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.values = {name: float(v) for name, v in self.values.items()}
        bad = {name for name, v in self.values.items()
               if not math.isfinite(v) and name not in self.undefined}
        if bad:
            raise ValueError(f"non-finite metrics not flagged undefined: {sorted(bad)}")

    @property
    def names(self) -> list[str]:
        return list(self.values)

    def __getitem__(self, name: str) -> float:
        return self.values[name]


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile of an unsorted sample."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("percentile of an empty sample")
    if not 0.0 <= p <= 100.0:
        raise ValueError("p must be in [0, 100]")
    ordered = np.sort(values)
    rank = p / 100.0 * (ordered.size - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, ordered.size - 1)
    frac = rank - lo
    return float(ordered[lo] + frac * (ordered[hi] - ordered[lo]))


def l_moments(values) -> tuple[float, float, float, float]:
    """Sample L-moments L1..L4 via unbiased probability-weighted moments.

    L-moments that need more order statistics than the sample provides
    (L2 with n<2, L3 with n<3, L4 with n<4) come back as NaN.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    if n == 0:
        raise DataError("L-moments of an empty sample")
    i = np.arange(n, dtype=np.float64)  # 0-based order index
    b = [float(x.mean()), math.nan, math.nan, math.nan]
    if n >= 2:
        b[1] = float(np.sum(i / (n - 1) * x) / n)
    if n >= 3:
        b[2] = float(np.sum(i * (i - 1) / ((n - 1) * (n - 2)) * x) / n)
    if n >= 4:
        b[3] = float(np.sum(i * (i - 1) * (i - 2) / ((n - 1) * (n - 2) * (n - 3)) * x) / n)
    l1 = b[0]
    l2 = 2 * b[1] - b[0] if n >= 2 else math.nan
    l3 = 6 * b[2] - 6 * b[1] + b[0] if n >= 3 else math.nan
    l4 = 20 * b[3] - 30 * b[2] + 12 * b[1] - b[0] if n >= 4 else math.nan
    return l1, l2, l3, l4


def _mode_binned(values: np.ndarray, width: float) -> float:
    """Mode on bins of `width` anchored so bin 0 is centered at the minimum."""
    lo = values.min()
    bins = np.floor((values - lo) / width + 0.5).astype(np.int64)
    counts = np.bincount(bins)
    return float(lo + np.argmax(counts) * width)


def _mode_integer(values: np.ndarray) -> float:
    ints = np.round(values).astype(np.int64)
    shifted = ints - ints.min()
    counts = np.bincount(shifted)
    return float(np.argmax(counts) + ints.min())


def _channel_stats(prefix: str, values: np.ndarray, mode_value: float,
                   undefined: set[str]) -> dict[str, float]:
    n = values.size
    vmin = float(values.min())
    vmax = float(values.max())
    mean = float(values.mean())
    med = percentile(values, 50)
    var = float(values.var(ddof=1))
    std = math.sqrt(var)
    m2 = float(((values - mean) ** 2).mean())
    m3 = float(((values - mean) ** 3).mean())
    m4 = float(((values - mean) ** 4).mean())
    l1, l2, l3, l4 = l_moments(values)

    def flag(name: str) -> float:
        undefined.add(f"{prefix}.{name}")
        return math.nan

    out: dict[str, float] = {}
    out["minimum"] = vmin
    out["maximum"] = vmax
    out["mean"] = mean
    out["median"] = med
    out["mode"] = mode_value
    out["stddev"] = std
    out["variance"] = var
    out["CV"] = std / mean if mean != 0.0 else flag("CV")
    out["IQ"] = percentile(values, 75) - percentile(values, 25)
    out["skewness"] = m3 / m2 ** 1.5 if m2 > 0.0 else flag("skewness")
    out["kurtosis"] = m4 / m2 ** 2 if m2 > 0.0 else flag("kurtosis")
    out["AAD"] = float(np.abs(values - mean).mean())
    out["MAD.median"] = float(np.median(np.abs(values - med)))
    out["MAD.mode"] = float(np.median(np.abs(values - mode_value)))
    out["L1"] = l1
    out["L2"] = l2 if math.isfinite(l2) else flag("L2")
    out["L3"] = l3 if math.isfinite(l3) else flag("L3")
    out["L4"] = l4 if math.isfinite(l4) else flag("L4")
    out["L.skewness"] = l3 / l2 if math.isfinite(l3) and l2 != 0.0 else flag("L.skewness")
    out["L.kurtosis"] = l4 / l2 if math.isfinite(l4) and l2 != 0.0 else flag("L.kurtosis")
    for p in PERCENTILE_LEVELS:
        out[f"P{p:02d}"] = percentile(values, p)
    out["canopy.relief.ratio"] = ((mean - vmin) / (vmax - vmin)
                                  if vmax > vmin else flag("canopy.relief.ratio"))
    out["SQRT.mean.SQ"] = math.sqrt(float((values ** 2).mean()))
    out["CURT.mean.CUBE"] = float(np.cbrt((values ** 3).mean()))
    return {f"{prefix}.{k}": v for k, v in out.items()}


def cloud_metrics(cloud: NormalizedCloud, height_cutoff: float = HEIGHT_CUTOFF,
                  plot_id: str = "", system: str = "") -> MetricVector:
    """Compute the full discrete metric suite on returns above the cutoff."""
    mask = np.asarray(cloud.z) > height_cutoff
    n = int(mask.sum())
    if n < 2:
        raise DataError(
            f"only {n} returns above the {height_cutoff} m cutoff; need at least 2")

    heights = cloud.z[mask]
    intensity = cloud.intensity[mask].astype(np.float64)
    returns = cloud.return_number[mask]

    undefined: set[str] = set()
    values: dict[str, float] = {"Total.return.count": float(n)}
    counts = np.bincount(returns, minlength=MAX_RETURN_COUNTED + 1)
    for r in range(1, MAX_RETURN_COUNTED + 1):
        values[f"Return.{r}.count"] = float(counts[r]) if r < len(counts) else 0.0

    values.update(_channel_stats("Elev", heights,
                                 _mode_binned(heights, MODE_BIN_HEIGHT), undefined))
    values.update(_channel_stats("Int", intensity,
                                 _mode_integer(intensity), undefined))
    return MetricVector(plot_id=plot_id, system=system, values=values,
                        undefined=frozenset(undefined))


def write_metrics_csv(path, rows: list[MetricVector]) -> None:
    """One CSV row per plot; column order follows the first row's metrics."""
    if not rows:
        raise DataError("no metric rows to write")
    names = rows[0].names
    for row in rows[1:]:
        if row.names != names:
            raise DataError("metric rows have inconsistent columns")
    with open(path, "w", newline="") as fh:
        fh.write("plot_id,system," + ",".join(names) + "\n")
        for row in rows:
            rendered = ",".join(repr(row.values[n]) for n in names)
            fh.write(f"{row.plot_id},{row.system},{rendered}\n")


def read_metrics_csv(path) -> list[MetricVector]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["plot_id", "system"]:
            raise DataError(f"{path}: not a metrics CSV")
        names = header[2:]
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise DataError(f"{path}: ragged row")
            vals = {n: float(v) for n, v in zip(names, parts[2:])}
            undefined = frozenset(n for n, v in vals.items() if not math.isfinite(v))
            rows.append(MetricVector(plot_id=parts[0], system=parts[1],
                                     values=vals, undefined=undefined))
    return rows
