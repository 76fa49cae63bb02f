"""Error metrics and model comparison: MAE, RMSE, percentage errors,
accuracy, and pairwise paired-t comparisons with Bonferroni adjustment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError


def _paired(pred, obs) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    o = np.asarray(obs, dtype=np.float64)
    if p.shape != o.shape or p.ndim != 1 or p.size == 0:
        raise DataError("predictions and observations must be equal-length non-empty vectors")
    return p, o


def mae(pred, obs) -> float:
    p, o = _paired(pred, obs)
    return float(np.abs(p - o).mean())


def rmse(pred, obs) -> float:
    p, o = _paired(pred, obs)
    return float(np.sqrt(((p - o) ** 2).mean()))


def pct_error(pred, obs) -> tuple[np.ndarray, float]:
    """(per-plot absolute percentage errors, their mean). Observations must
    be strictly positive."""
    p, o = _paired(pred, obs)
    if np.any(o <= 0.0):
        raise DataError("percentage error needs strictly positive observations")
    per_plot = 100.0 * np.abs(p - o) / o
    return per_plot, float(per_plot.mean())


def accuracy(pred, obs) -> float:
    """100 minus the mean percentage error."""
    return 100.0 - pct_error(pred, obs)[1]


@dataclass
class ComparisonTable:
    """Pairwise differences of mean absolute error between systems.

    `difference[a][b]` is mean(|err_a| - |err_b|); `p_adjusted[a][b]` the
    Bonferroni-adjusted paired-t p-value for that difference being zero.
    """

    systems: list[str]
    difference: dict[str, dict[str, float]] = field(default_factory=dict)
    p_adjusted: dict[str, dict[str, float]] = field(default_factory=dict)

    def render(self) -> str:
        """Human-readable matrix: differences above, p-values below the diagonal."""
        width = max(12, max(len(s) for s in self.systems) + 2)
        rows = [" " * width + "".join(f"{s:>{width}}" for s in self.systems)]
        for a in self.systems:
            cells = []
            for b in self.systems:
                if a == b:
                    cells.append(f"{'-':>{width}}")
                elif self.systems.index(a) < self.systems.index(b):
                    cells.append(f"{self.difference[a][b]:>{width}.5f}")
                else:
                    cells.append(f"{self.p_adjusted[a][b]:>{width}.5f}")
            rows.append(f"{a:<{width}}" + "".join(cells))
        return "\n".join(rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("system_a,system_b,mean_difference,p_adjusted\n")
            for i, a in enumerate(self.systems):
                for b in self.systems[i + 1:]:
                    fh.write(f"{a},{b},{self.difference[a][b]!r},"
                             f"{self.p_adjusted[a][b]!r}\n")


def paired_t_pvalue(differences: np.ndarray) -> float:
    """Two-sided paired t-test p-value for mean(differences) == 0.

    All-zero-variance differences carry no evidence either way, so they
    report p = 1.0 when centered on zero (and ~0 otherwise).
    """
    d = np.asarray(differences, dtype=np.float64)
    n = d.size
    if n < 3:
        raise DataError("paired comparison needs at least 3 plots")
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 1.0 if d.mean() == 0.0 else 0.0
    t = d.mean() / (sd / math.sqrt(n))
    return float(2.0 * stats.t.sf(abs(t), n - 1))


def compare_models(errors_by_system: dict[str, np.ndarray]) -> ComparisonTable:
    """Pairwise comparison of per-plot absolute errors across systems.

    Differences go above the diagonal, Bonferroni-adjusted p-values below;
    the adjustment factor is the number of pairwise comparisons.
    """
    systems = list(errors_by_system)
    if len(systems) < 2:
        raise DataError("need at least two systems to compare")
    lengths = {len(v) for v in errors_by_system.values()}
    if len(lengths) != 1:
        raise DataError("error vectors must be paired by plot (equal length)")
    m = len(systems) * (len(systems) - 1) // 2
    table = ComparisonTable(systems=systems)
    for a in systems:
        table.difference[a] = {}
        table.p_adjusted[a] = {}
    for i, a in enumerate(systems):
        for b in systems[i + 1:]:
            da = np.abs(np.asarray(errors_by_system[a], dtype=np.float64))
            db = np.abs(np.asarray(errors_by_system[b], dtype=np.float64))
            diff = da - db
            p_adj = min(1.0, m * paired_t_pvalue(diff))
            table.difference[a][b] = float(diff.mean())
            table.difference[b][a] = -float(diff.mean())
            table.p_adjusted[a][b] = p_adj
            table.p_adjusted[b][a] = p_adj
    return table


@dataclass
class EvalReport:
    """Per-plot predicted vs observed values plus the aggregate errors."""

    plot_ids: list[str]
    predicted: np.ndarray
    observed: np.ndarray
    mae: float
    rmse: float
    pct_errors: np.ndarray
    mean_pct_error: float
    accuracy: float

    @staticmethod
    def build(plot_ids, predicted, observed) -> "EvalReport":
        p, o = _paired(predicted, observed)
        per_plot, mean_pct = pct_error(p, o)
        return EvalReport(
            plot_ids=list(plot_ids), predicted=p, observed=o,
            mae=mae(p, o), rmse=rmse(p, o),
            pct_errors=per_plot, mean_pct_error=mean_pct,
            accuracy=100.0 - mean_pct,
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("plot_id,observed,predicted,pct_error\n")
            for pid, o, p, e in zip(self.plot_ids, self.observed,
                                    self.predicted, self.pct_errors):
                fh.write(f"{pid},{float(o)!r},{float(p)!r},{float(e)!r}\n")
