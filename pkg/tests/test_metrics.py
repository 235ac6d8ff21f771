import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimfuse.errors import DomainError
from aimfuse.metrics import (METRICS, MetricsReport, aggregate_folds, compute_f_rank, compute_metrics,
                             read_metrics_csv, read_variant_matrix, subset_metrics, write_metrics_csv,
                             write_subset_csv, write_variant_matrix)

from oracles import all_metrics, random_prediction_set


class TestComputeMetrics:
    def test_perfect_predictions(self):
        labels = np.array([0, 2, 1, 2])
        report = compute_metrics(np.eye(3)[labels], labels)
        np.testing.assert_array_equal(report.as_array(), 1.0)

    def test_three_instance_oracle(self):
        probs = np.array([[0.7, 0.3], [0.4, 0.6], [0.55, 0.45]])
        labels = np.array([0, 0, 1])
        report = compute_metrics(probs, labels)
        # flattened positives 0.7 0.4 0.45 against negatives 0.3 0.6 0.55: 5 of 9 pairs ordered correctly
        assert report.auc == pytest.approx(5 / 9, abs=1e-15)
        # descending: 0.7+ 0.6- 0.55- 0.45+ 0.4+ 0.3- -> AP = (1 + 2/4 + 3/5) / 3
        assert report.aupr == pytest.approx((1 + 0.5 + 0.6) / 3, abs=1e-15)
        np.testing.assert_allclose(report.as_array(), all_metrics(probs, labels), atol=1e-12)

    def test_single_class_predictions(self):
        probs = np.tile([0.9, 0.1], (4, 1))
        report = compute_metrics(probs, np.array([0, 0, 1, 1]))
        assert (report.acc, report.rec, report.pre) == (0.5, 0.5, 0.25)

    def test_argmax_tie_goes_to_lower_class(self):
        assert compute_metrics(np.array([[0.5, 0.5], [0.2, 0.8]]), np.array([0, 1])).acc == 1.0

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            compute_metrics(np.array([[0.5, 0.5]]), np.array([2]))

    @given(st.integers(0, 100_000))
    def test_matches_brute_force(self, seed):
        probs, labels = random_prediction_set(np.random.default_rng(seed))
        np.testing.assert_allclose(compute_metrics(probs, labels).as_array(), all_metrics(probs, labels),
                                   rtol=0, atol=1e-10)

    @given(st.integers(0, 100_000))
    def test_row_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        probs, labels = random_prediction_set(r)
        perm = r.permutation(len(labels))
        np.testing.assert_allclose(compute_metrics(probs[perm], labels[perm]).as_array(),
                                   compute_metrics(probs, labels).as_array(), atol=1e-12)

    @given(st.integers(0, 100_000))
    def test_bounded(self, seed):
        probs, labels = random_prediction_set(np.random.default_rng(seed))
        values = compute_metrics(probs, labels).as_array()
        assert np.all((values >= 0) & (values <= 1))


class TestAggregate:
    def test_single_fold(self):
        rep = MetricsReport(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
        summary = aggregate_folds([rep])
        assert summary.mean == rep and np.all(summary.std.as_array() == 0)

    def test_two_folds(self):
        summary = aggregate_folds([MetricsReport(*[0.4] * 6), MetricsReport(*[0.6] * 6)])
        np.testing.assert_allclose(summary.mean.as_array(), 0.5)
        np.testing.assert_allclose(summary.std.as_array(), math.sqrt(0.02), rtol=1e-12)

    def test_identical_folds(self):
        rep = MetricsReport(0.3, 0.2, 0.3, 0.4, 0.5, 0.6)
        np.testing.assert_allclose(aggregate_folds([rep, rep, rep]).std.as_array(), 0.0, atol=1e-15)


class TestFRank:
    def test_dominating_pair(self):
        np.testing.assert_array_equal(compute_f_rank([[0.9] * 6, [0.1] * 6]), [2.0, 1.0])

    def test_ties_share_mean_rank(self):
        np.testing.assert_array_equal(compute_f_rank([[0.5] * 6, [0.5] * 6, [0.1] * 6]), [2.5, 2.5, 1.0])

    def test_rounding(self):
        # ranks 2,1,1 over three metrics -> 4/3
        assert compute_f_rank([[0.9, 0.1, 0.1], [0.1, 0.9, 0.9]]).tolist() == [1.33, 1.67]

    @given(st.integers(2, 9), st.integers(0, 10_000))
    def test_bounds_and_rank_sum(self, v, seed):
        r = np.random.default_rng(seed)
        mat = r.integers(0, 4, size=(v, 6)) / 4 if seed % 2 else r.random((v, 6))
        f = compute_f_rank(mat)
        assert np.all((f >= 1) & (f <= v))
        # every metric column contributes ranks summing to V(V+1)/2
        assert abs(f.sum() - v * (v + 1) / 2) <= v * 0.005 + 1e-9

    @pytest.mark.parametrize("bad", [[[0.1] * 6], [[0.1] * 6, [0.2] * 5], [[0.1] * 6, [float("nan")] * 6]])
    def test_refused(self, bad):
        with pytest.raises(DomainError):
            compute_f_rank(bad)


class TestSubset:
    PAIRS = [("a", "b"), ("c", "d"), ("a", "e"), ("f", "g")]

    def _data(self):
        probs = np.array([[0.8, 0.2], [0.3, 0.7], [0.4, 0.6], [0.9, 0.1]])
        return probs, np.array([0, 0, 1, 1])

    def test_full_subset_equals_unfiltered(self):
        probs, labels = self._data()
        everyone = {d for p in self.PAIRS for d in p}
        assert subset_metrics(probs, labels, self.PAIRS, everyone) == compute_metrics(probs, labels)

    def test_disjoint_subset(self):
        probs, labels = self._data()
        assert subset_metrics(probs, labels, self.PAIRS, {"z"}) is None

    def test_filters_to_touching_pairs(self):
        probs, labels = self._data()
        assert subset_metrics(probs, labels, self.PAIRS, {"a"}) == compute_metrics(probs[[0, 2]], labels[[0, 2]])

    def test_empty_subset(self):
        with pytest.raises(DomainError):
            subset_metrics(*self._data(), self.PAIRS, set())


class TestFiles:
    def test_metrics_csv_round_trip(self, tmp_path):
        reps = [MetricsReport(*np.random.default_rng(i).random(6)) for i in range(3)]
        summary = aggregate_folds(reps)
        write_metrics_csv(summary, tmp_path / "m.csv")
        rows = read_metrics_csv(tmp_path / "m.csv")
        assert list(rows) == ["0", "1", "2", "mean", "std"]
        assert rows["1"] == reps[1] and rows["mean"] == summary.mean

    def test_subset_empty_marker(self, tmp_path):
        write_subset_csv({"0": None, "1": MetricsReport(*[0.5] * 6)}, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[1] == "0," + ",".join(["empty"] * len(METRICS))

    def test_variant_matrix_round_trip(self, tmp_path):
        mat = np.random.default_rng(0).random((3, 6))
        write_variant_matrix(["x", "y", "z"], mat, tmp_path / "v.csv", compute_f_rank(mat))
        names, back = read_variant_matrix(tmp_path / "v.csv")
        assert names == ["x", "y", "z"] and np.array_equal(back, mat)
