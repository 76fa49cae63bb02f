"""Exploratory variable selection: zero-variance filter, pairwise
correlation filter, importance ranking and the threshold/fallback rules.

Importance is a deterministic surrogate for a smoother-based ranking: each
candidate gets the R^2 of a univariate cubic polynomial fit of the target
against it, min-max normalized to [0, 1]. That keeps the "nonlinear
univariate explanatory power" signal without any stochastic fitting, so a
fixed seed gives byte-identical selections.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

CORRELATION_THRESHOLD = 0.5
IMPORTANCE_THRESHOLD = 0.5
FALLBACK_TOP_K = 3
MIN_SELECTED = 2
MAX_SELECTED = 5  # more than five variables stops paying off on small plots
ZERO_VARIANCE_EPS = 1e-12


@dataclass
class FeatureTable:
    """Plots x metrics matrix with an aligned target vector."""

    plot_ids: list[str]
    names: list[str]
    data: np.ndarray          # shape (n_plots, n_features)
    target: np.ndarray        # shape (n_plots,)
    target_name: str = "AGBt"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.data.shape != (len(self.plot_ids), len(self.names)):
            raise ValueError("data shape does not match plot/name lists")
        if self.target.shape != (len(self.plot_ids),):
            raise ValueError("target length does not match plots")
        if len(self.plot_ids) < 2:
            raise DataError("a feature table needs at least 2 plots")
        if not np.all(np.isfinite(self.data)) or not np.all(np.isfinite(self.target)):
            raise DataError("feature table must not contain missing cells")

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.names.index(name)]

    def without(self, drop: set[str]) -> "FeatureTable":
        keep = [i for i, n in enumerate(self.names) if n not in drop]
        return FeatureTable(self.plot_ids, [self.names[i] for i in keep],
                            self.data[:, keep], self.target, self.target_name)

    def restricted(self, names: list[str]) -> "FeatureTable":
        idx = [self.names.index(n) for n in names]
        return FeatureTable(self.plot_ids, list(names), self.data[:, idx],
                            self.target, self.target_name)


@dataclass
class SelectionReport:
    target_name: str
    dropped_zero_variance: list[str] = field(default_factory=list)
    dropped_correlated: list[tuple[str, str, float]] = field(default_factory=list)
    importance: dict[str, float] = field(default_factory=dict)
    selected: list[str] = field(default_factory=list)
    fallback_used: bool = False
    min_rule_used: bool = False

    def to_json(self) -> str:
        payload = {
            "target": self.target_name,
            "dropped_zero_variance": self.dropped_zero_variance,
            "dropped_correlated": [
                {"name": n, "against": other, "abs_r": r}
                for n, other, r in self.dropped_correlated
            ],
            "importance": self.importance,
            "selected": self.selected,
            "fallback_used": self.fallback_used,
            "min_rule_used": self.min_rule_used,
        }
        return json.dumps(payload, indent=2, sort_keys=False)


def assemble_table(metric_rows, truth: dict[str, dict[str, float]],
                   target_name: str) -> FeatureTable:
    """Join metric vectors with per-plot ground truth into a FeatureTable.

    Columns holding any undefined (non-finite) cell are dropped up front so
    the table invariant of having no missing cells holds.
    """
    rows = sorted(metric_rows, key=lambda r: r.plot_id)
    missing = [r.plot_id for r in rows if r.plot_id not in truth]
    if missing:
        raise DataError(f"no ground truth for plots: {missing}")
    names = rows[0].names
    data = np.array([[r.values[n] for n in names] for r in rows])
    finite = np.all(np.isfinite(data), axis=0)
    names = [n for n, ok in zip(names, finite) if ok]
    data = data[:, finite]
    target = np.array([truth[r.plot_id][target_name] for r in rows])
    return FeatureTable([r.plot_id for r in rows], names, data, target, target_name)


def drop_zero_variance(table: FeatureTable,
                       eps: float = ZERO_VARIANCE_EPS) -> tuple[FeatureTable, list[str]]:
    """Remove columns whose sample variance is (numerically) zero."""
    variances = table.data.var(axis=0, ddof=1)
    dropped = [n for n, v in zip(table.names, variances) if v < eps]
    if len(dropped) == len(table.names):
        raise DataError("every column has zero variance")
    return table.without(set(dropped)), dropped


def pearson_r(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if denom == 0.0:
        return math.nan
    return float((a * b).sum() / denom)


def correlation_filter(table: FeatureTable, threshold: float = CORRELATION_THRESHOLD
                       ) -> tuple[FeatureTable, list[tuple[str, str, float]]]:
    """Greedy decorrelation: walk candidates by descending |r| with the
    target and keep one only if its |r| with every kept column stays below
    the threshold. The survivors are pairwise decorrelated by construction."""
    if len(table.names) < 2:
        return table, []
    target_r = [abs(pearson_r(table.data[:, i], table.target))
                for i in range(len(table.names))]
    order = sorted(range(len(table.names)),
                   key=lambda i: (-target_r[i], table.names[i]))
    kept: list[int] = []
    rejected: list[tuple[str, str, float]] = []
    for i in order:
        clash = None
        for j in kept:
            r = abs(pearson_r(table.data[:, i], table.data[:, j]))
            if not (r < threshold):
                clash = (table.names[i], table.names[j], r)
                break
        if clash is None:
            kept.append(i)
        else:
            rejected.append(clash)
    keep_names = {table.names[i] for i in kept}
    return table.without(set(table.names) - keep_names), rejected


def importance(table: FeatureTable) -> dict[str, float]:
    """Normalized univariate cubic-fit R^2 per column, in [0, 1].

    The polynomial degree backs off to n - 2 on very small tables so at
    least one residual degree of freedom remains. A single candidate (or an
    all-tied ranking) normalizes to 1.0 by convention.
    """
    n = len(table.plot_ids)
    if n < 3:
        raise DataError("importance ranking needs at least 3 plots")
    degree = min(3, n - 2)
    y = table.target
    ss_tot = float(((y - y.mean()) ** 2).sum())
    raw: dict[str, float] = {}
    for i, name in enumerate(table.names):
        x = table.data[:, i]
        with warnings.catch_warnings():
            # near-collinear power columns are fine: R^2 comes from residuals
            warnings.simplefilter("ignore", np.exceptions.RankWarning)
            coeffs = np.polyfit(x, y, degree)
        resid = y - np.polyval(coeffs, x)
        ss_res = float((resid ** 2).sum())
        raw[name] = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 0.0
    lo = min(raw.values())
    hi = max(raw.values())
    if hi - lo < 1e-15:
        return {name: 1.0 for name in raw}
    return {name: (v - lo) / (hi - lo) for name, v in raw.items()}


def select(scores: dict[str, float], threshold: float = IMPORTANCE_THRESHOLD,
           fallback_k: int = FALLBACK_TOP_K, min_vars: int = MIN_SELECTED,
           max_vars: int = MAX_SELECTED) -> tuple[list[str], bool, bool]:
    """Apply the importance rules: keep scores >= threshold; fall back to
    the top `fallback_k` when nothing qualifies; pad a single qualifier up
    to `min_vars`; cap at `max_vars`. Returns (names, fallback, min_rule)."""
    if not scores:
        raise DataError("no importance scores to select from")
    ranked = sorted(scores, key=lambda n: (-scores[n], n))
    chosen = [n for n in ranked if scores[n] >= threshold]
    fallback = False
    min_rule = False
    if not chosen:
        chosen = ranked[:fallback_k]
        fallback = True
    elif len(chosen) == 1 and len(ranked) > 1:
        chosen = ranked[:min(min_vars, len(ranked))]
        min_rule = True
    return chosen[:max_vars], fallback, min_rule


def select_features(table: FeatureTable,
                    correlation_threshold: float = CORRELATION_THRESHOLD,
                    importance_threshold: float = IMPORTANCE_THRESHOLD,
                    fallback_k: int = FALLBACK_TOP_K, min_vars: int = MIN_SELECTED,
                    max_vars: int = MAX_SELECTED) -> tuple[FeatureTable, SelectionReport]:
    """Run the full workflow and return the reduced table plus the report."""
    report = SelectionReport(target_name=table.target_name)
    table, report.dropped_zero_variance = drop_zero_variance(table)
    table, report.dropped_correlated = correlation_filter(table, correlation_threshold)
    report.importance = importance(table)
    report.selected, report.fallback_used, report.min_rule_used = select(
        report.importance, importance_threshold, fallback_k, min_vars, max_vars)
    return table.restricted(report.selected), report
