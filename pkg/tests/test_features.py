import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import correlation_filter_reference
from lidarbiomass.discrete_metrics import MetricVector
from lidarbiomass.errors import DataError
from lidarbiomass.features import (FeatureTable, assemble_table,
                                   correlation_filter, drop_zero_variance,
                                   importance, pearson_r, select,
                                   select_features)


def table_from(data, target, names=None, plot_ids=None):
    data = np.asarray(data, dtype=np.float64)
    names = names or [f"v{i}" for i in range(data.shape[1])]
    plot_ids = plot_ids or [f"p{i}" for i in range(data.shape[0])]
    return FeatureTable(plot_ids, list(names), data, np.asarray(target, float))


class TestZeroVariance:
    def test_constant_column_removed(self, rng):
        data = np.column_stack([np.full(8, 3.0), rng.normal(0, 1, 8)])
        table, dropped = drop_zero_variance(table_from(data, rng.normal(0, 1, 8)))
        assert dropped == ["v0"]
        assert table.names == ["v1"]

    def test_single_differing_value_kept(self, rng):
        col = np.full(8, 3.0)
        col[4] = 3.5
        data = np.column_stack([col, rng.normal(0, 1, 8)])
        _, dropped = drop_zero_variance(table_from(data, rng.normal(0, 1, 8)))
        assert dropped == []

    def test_planted_constants_counted_exactly(self, rng):
        n_cols, n_const = 145, 44
        data = rng.normal(0, 1, (10, n_cols))
        const_idx = rng.choice(n_cols, size=n_const, replace=False)
        data[:, const_idx] = rng.uniform(-5, 5, n_const)
        table, dropped = drop_zero_variance(table_from(data, rng.normal(0, 1, 10)))
        assert len(dropped) == n_const
        assert len(table.names) == n_cols - n_const

    def test_all_constant_rejected(self):
        data = np.ones((5, 3))
        with pytest.raises(DataError):
            drop_zero_variance(table_from(data, np.arange(5.0)))


class TestCorrelationFilter:
    def test_identical_columns_keep_one(self, rng):
        col = rng.normal(0, 1, 10)
        data = np.column_stack([col, col])
        table, rejected = correlation_filter(table_from(data, col))
        assert len(table.names) == 1
        assert len(rejected) == 1
        assert rejected[0][2] == pytest.approx(1.0)

    def test_orthogonal_columns_both_kept(self):
        a = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
        b = np.array([1.0, 1.0, -1.0, -1.0, 1.0, -1.0])
        # r(a, b) is small by construction
        data = np.column_stack([a, b])
        table, rejected = correlation_filter(table_from(data, a + 0.1 * b))
        assert set(table.names) == {"v0", "v1"}

    def test_matches_reference_ordering_oracle(self, rng):
        for _ in range(10):
            base = rng.normal(0, 1, (12, 3))
            # six columns with planted cross-correlations
            data = np.column_stack([
                base[:, 0],
                base[:, 0] + 0.05 * rng.normal(size=12),
                base[:, 1],
                0.7 * base[:, 0] + 0.7 * base[:, 1],
                base[:, 2],
                -base[:, 2] + 0.02 * rng.normal(size=12),
            ])
            target = base @ np.array([1.0, 0.5, 0.25]) + 0.1 * rng.normal(size=12)
            names = [f"v{i}" for i in range(6)]
            table, _ = correlation_filter(table_from(data, target, names))
            expected = correlation_filter_reference(data, target, names, 0.5)
            assert sorted(table.names) == expected

    def test_survivors_pairwise_below_threshold(self, rng):
        data = rng.normal(0, 1, (15, 8))
        data[:, 3] = data[:, 0] * 0.9 + 0.1 * rng.normal(size=15)
        table, _ = correlation_filter(table_from(data, rng.normal(0, 1, 15)))
        for i, a in enumerate(table.names):
            for b in table.names[i + 1:]:
                r = abs(pearson_r(table.column(a), table.column(b)))
                assert r < 0.5


class TestImportance:
    def test_exact_predictor_scores_one(self, rng):
        target = rng.normal(0, 1, 10)
        data = np.column_stack([target, rng.normal(0, 1, 10)])
        scores = importance(table_from(data, target))
        assert scores["v0"] == 1.0

    def test_noise_column_scores_near_zero(self, rng):
        target = np.linspace(0, 10, 12)
        data = np.column_stack([
            target + 0.01 * rng.normal(size=12),
            target ** 2,
            rng.normal(0, 1, 12),
        ])
        scores = importance(table_from(data, target))
        assert scores["v2"] == min(scores.values())
        assert scores["v2"] <= 0.05

    def test_single_candidate_scores_one(self, rng):
        target = rng.normal(0, 1, 8)
        data = rng.normal(0, 1, (8, 1))
        assert importance(table_from(data, target)) == {"v0": 1.0}

    def test_affine_rescaling_keeps_selection(self, rng):
        target = np.linspace(1, 20, 10) ** 1.5
        data = np.column_stack([
            np.linspace(1, 20, 10),
            rng.normal(0, 1, 10),
            np.linspace(5, 0, 10) + rng.normal(0, 0.5, 10),
        ])
        table = table_from(data, target)
        base_sel, *_ = select(importance(table))
        scaled = data.copy()
        scaled[:, 0] = scaled[:, 0] * 123.0 - 45.0
        scaled_sel, *_ = select(importance(table_from(scaled, target)))
        assert base_sel == scaled_sel


class TestSelect:
    def test_threshold_rule(self):
        sel, fallback, min_rule = select({"a": 0.9, "b": 0.6, "c": 0.2})
        assert sel == ["a", "b"]
        assert not fallback and not min_rule

    def test_fallback_top_three(self):
        scores = {"a": 0.4, "b": 0.3, "c": 0.2, "d": 0.1}
        sel, fallback, _ = select(scores)
        assert sel == ["a", "b", "c"]
        assert fallback

    def test_single_qualifier_extended(self):
        scores = {"a": 0.8, "b": 0.45, "c": 0.1}
        sel, fallback, min_rule = select(scores)
        assert sel == ["a", "b"]
        assert min_rule and not fallback

    def test_cap_at_five(self):
        scores = {f"v{i}": 0.9 - 0.01 * i for i in range(8)}
        sel, *_ = select(scores)
        assert len(sel) == 5
        assert sel == [f"v{i}" for i in range(5)]

    def test_deterministic_tie_break(self):
        scores = {"b": 0.7, "a": 0.7, "c": 0.7}
        sel, *_ = select(scores)
        assert sel == ["a", "b", "c"]


class TestPipelineWorkflow:
    def build_rows(self, rng, n_plots=10):
        rows = []
        target = {}
        for i in range(n_plots):
            pid = f"p{i}"
            height = 5.0 + 2.0 * i
            rows.append(MetricVector(
                plot_id=pid, system="ULS_D",
                values={
                    "h": height + rng.normal(0, 0.1),
                    "h_copy": height * 2.0 + rng.normal(0, 0.01),
                    "noise": rng.normal(0, 1.0),
                    "const": 7.0,
                }))
            target[pid] = {"AGBt": height ** 1.8, "AGBm": height}
        return rows, target

    def test_end_to_end_selection(self, rng):
        rows, truth = self.build_rows(rng)
        table = assemble_table(rows, truth, "AGBt")
        reduced, report = select_features(table)
        assert "const" in report.dropped_zero_variance
        assert report.selected
        assert len(report.selected) <= 5
        for i, a in enumerate(reduced.names):
            for b in reduced.names[i + 1:]:
                assert abs(pearson_r(reduced.column(a), reduced.column(b))) < 0.5
        payload = json.loads(report.to_json())
        assert payload["selected"] == report.selected

    def test_assembly_drops_undefined_columns(self, rng):
        rows, truth = self.build_rows(rng)
        broken = dict(rows[0].values)
        broken["noise"] = float("nan")
        rows[0] = MetricVector(plot_id=rows[0].plot_id, system="ULS_D",
                               values=broken, undefined=frozenset({"noise"}))
        table = assemble_table(rows, truth, "AGBt")
        assert "noise" not in table.names

    def test_missing_truth_rejected(self, rng):
        rows, truth = self.build_rows(rng)
        del truth["p3"]
        with pytest.raises(DataError):
            assemble_table(rows, truth, "AGBt")

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_deterministic_for_fixed_input(self, seed):
        rng = np.random.default_rng(seed)
        rows, truth = self.build_rows(rng)
        table = assemble_table(rows, truth, "AGBt")
        _, first = select_features(table)
        _, second = select_features(table)
        assert first.selected == second.selected
        assert first.importance == second.importance
