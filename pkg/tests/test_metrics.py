"""Tests for AP, Forget, run summaries and k-fold aggregation."""

from __future__ import annotations

import numpy as np
import pytest

from app.exceptions import IncompleteMatrixError, MissingFoldsError
from app.models.schemas import Method
from app.services import metrics
from app.utils.serialization import read_csv


# ── Helpers ──

WORKED = [
    [0.5, 0.4, 0.3],
    [None, 0.6, 0.5],
    [None, None, 0.7],
]


def _random_matrix(rng, n: int):
    a = metrics.empty_matrix(n)
    for i in range(n):
        for j in range(i, n):
            a[i][j] = float(rng.uniform())
    return a


def _oracle_ap(a) -> float:
    n = len(a)
    total = 0.0
    for t in range(n):
        total += a[t][n - 1]
    return total / n


def _oracle_forget(a) -> float:
    n = len(a)
    total = 0.0
    for t in range(n - 1):
        best = a[t][t]
        for z in range(t, n - 1):
            if a[t][z] > best:
                best = a[t][z]
        total += best - a[t][n - 1]
    return total / (n - 1)


# ── AP / Forget ──

class TestMatrixMetrics:
    def test_worked_example(self):
        assert metrics.average_performance(WORKED) == pytest.approx(0.5, abs=1e-12)
        assert metrics.average_forgetting(WORKED) == pytest.approx(0.15, abs=1e-12)

    def test_constant_matrix(self):
        a = [[0.8 if j >= i else None for j in range(4)] for i in range(4)]
        assert metrics.average_performance(a) == pytest.approx(0.8)
        assert metrics.average_forgetting(a) == pytest.approx(0.0)

    def test_non_decreasing_rows_do_not_forget(self):
        a = [[0.2, 0.4, 0.9], [None, 0.5, 0.6], [None, None, 0.1]]
        assert metrics.average_forgetting(a) <= 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = _random_matrix(rng, int(rng.integers(2, 7)))
            assert abs(metrics.average_performance(a) - _oracle_ap(a)) < 1e-12
            assert abs(metrics.average_forgetting(a) - _oracle_forget(a)) < 1e-12

    def test_incomplete_final_column(self):
        a = [[0.5, None], [None, 0.4]]
        with pytest.raises(IncompleteMatrixError):
            metrics.average_performance(a)

    def test_forget_needs_interim_values(self):
        a = [[None, 0.5], [None, 0.4]]
        with pytest.raises(IncompleteMatrixError):
            metrics.average_forgetting(a)
        with pytest.raises(IncompleteMatrixError):
            metrics.average_forgetting([[0.3]])

    def test_diagonal_and_off_diagonal(self):
        assert metrics.diagonal_mean(WORKED) == pytest.approx(0.6)
        assert metrics.off_diagonal_mean(WORKED) == pytest.approx(0.4)


# ── Run summaries ──

class TestRunMetrics:
    def test_build_from_complete_matrices(self):
        ooas = [[0.0, 0.9, 0.8], [None, 0.0, 0.6], [None, None, 0.1]]
        run = metrics.build_run_metrics(Method.VANILLA, ["a", "b", "c"], WORKED, ooas, WORKED,
                                        seed=3, memory_bytes=None)
        assert run.ap == pytest.approx(0.5)
        assert run.forget == pytest.approx(0.15)
        assert run.ooas_rates == [0.8, 0.6, 0.1]
        assert run.mean_ooas_previous == pytest.approx(0.7)
        assert set(run.summary()) == {"AP", "Forget", "OOAS", "novelAP"}

    def test_final_column_only_has_no_forget(self):
        a = [[None, 0.9], [None, 0.7]]
        run = metrics.build_run_metrics(Method.JOINT, ["a", "b"], a, a, a)
        assert run.ap == pytest.approx(0.8)
        assert run.forget is None

    def test_mean_summary(self):
        a = [[None, 0.9], [None, 0.7]]
        b = [[None, 0.5], [None, 0.5]]
        runs = [metrics.build_run_metrics(Method.JOINT, ["x", "y"], m, m, m) for m in (a, b)]
        summary = metrics.mean_summary(runs)
        assert summary["AP"] == pytest.approx(0.65)
        assert summary["Forget"] is None


# ── K-fold aggregation ──

class TestNovelComposition:
    def test_unweighted_fold_mean(self):
        summary = metrics.aggregate_novel_composition({0: {"count": 0.4}, 1: {"count": 0.6}}, n_folds=2)
        assert summary.per_skill_mean["count"] == pytest.approx(0.5)
        assert summary.overall == pytest.approx(0.5)
        assert summary.table["count"] == [0.4, 0.6]

    def test_seen_gap(self):
        summary = metrics.aggregate_novel_composition(
            {0: {"color": 0.2}, 1: {"color": 0.4}}, n_folds=2,
            seen={0: {"color": 0.8}, 1: {"color": 0.6}},
        )
        assert summary.seen_gap["color"] == pytest.approx(0.4)

    def test_missing_folds(self):
        with pytest.raises(MissingFoldsError) as exc:
            metrics.aggregate_novel_composition({0: {"count": 0.4}, 2: {"count": 0.6}}, n_folds=3)
        assert exc.value.missing == [1]


# ── CSV ──

class TestMatrixCsv:
    def test_header_and_blank_cells(self, tmp_path):
        path = metrics.write_matrix_csv(tmp_path / "m.csv", WORKED, ["count", "color", "existence"])
        rows = read_csv(path)
        assert list(rows[0]) == ["task", "count", "color", "existence"]
        assert rows[1] == {"task": "color", "count": "", "color": "0.6", "existence": "0.5"}
