"""Metric formulas against hand-computed values plus structural invariants."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terradiff.dataio import SparseLabelSet
from terradiff.metrics import (
    ConfusionMatrix,
    evaluate_dense,
    format_report,
    report_csv,
    score_confusion,
)

# Hand-worked two-class example: counts [[50, 10], [5, 35]].
#   OA = 85/100; recall = (50/60, 35/40); AA = their mean
#   p_e = (60*55 + 40*45)/100^2 = 0.51; kappa = (0.85-0.51)/0.49
#   precision = (50/55, 35/45); F1_1 = 2*r*p/(r+p) = 40/46; IoU_1 = 50/65
HAND = ConfusionMatrix(np.array([[50, 10], [5, 35]]))


class TestHandOracle:
    def test_overall_accuracy(self):
        assert score_confusion(HAND).oa == pytest.approx(0.85, abs=1e-12)

    def test_average_accuracy(self):
        expected = (50 / 60 + 35 / 40) / 2
        assert score_confusion(HAND).aa == pytest.approx(expected, abs=1e-12)

    def test_kappa(self):
        assert score_confusion(HAND).kappa == pytest.approx(0.34 / 0.49, abs=1e-12)

    def test_per_class_f1(self):
        s = score_confusion(HAND)
        r1, p1 = 50 / 60, 50 / 55
        assert s.f1[0] == pytest.approx(2 * r1 * p1 / (r1 + p1), abs=1e-12)
        assert s.f1[0] == pytest.approx(0.869565, abs=1e-6)
        r2, p2 = 35 / 40, 35 / 45
        assert s.f1[1] == pytest.approx(2 * r2 * p2 / (r2 + p2), abs=1e-12)

    def test_per_class_iou(self):
        s = score_confusion(HAND)
        assert s.iou[0] == pytest.approx(50 / 65, abs=1e-12)
        assert s.iou[1] == pytest.approx(35 / 50, abs=1e-12)

    def test_means(self):
        s = score_confusion(HAND)
        assert s.mf1 == pytest.approx((s.f1[0] + s.f1[1]) / 2, abs=1e-12)
        assert s.miou == pytest.approx((50 / 65 + 35 / 50) / 2, abs=1e-12)


class TestStructure:
    def test_from_predictions_counts(self):
        y_true = [1, 1, 2, 2, 3]
        y_pred = [1, 2, 2, 2, 1]
        cm = ConfusionMatrix.from_predictions(y_true, y_pred, 3)
        expected = np.array([[1, 1, 0], [0, 2, 0], [1, 0, 0]])
        np.testing.assert_array_equal(cm.counts, expected)

    def test_rows_are_truth(self):
        cm = ConfusionMatrix.from_predictions([1, 1, 1], [2, 2, 2], 2)
        assert cm.counts[0, 1] == 3
        assert cm.counts[1, 0] == 0

    def test_diagonal_matrix_perfect_scores(self):
        s = score_confusion(ConfusionMatrix(np.diag([7, 3, 9])))
        assert s.oa == 1.0
        assert s.aa == 1.0
        assert s.kappa == 1.0
        assert np.allclose(s.f1[s.present], 1.0)

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix(np.array([[8, 2, 0], [1, 9, 0], [0, 0, 0]]))
        s = score_confusion(cm)
        assert not s.present[2]
        assert np.isnan(s.recall[2]) and np.isnan(s.f1[2])
        assert s.aa == pytest.approx((8 / 10 + 9 / 10) / 2)
        assert s.mf1 == pytest.approx(np.mean(s.f1[:2]))

    def test_class_predicted_but_never_true(self):
        cm = ConfusionMatrix(np.array([[5, 3], [0, 0]]))
        s = score_confusion(cm)
        assert s.present[0] and not s.present[1]
        assert s.aa == pytest.approx(5 / 8)

    def test_single_class_degenerate_kappa(self):
        assert score_confusion(ConfusionMatrix(np.array([[10, 0], [0, 0]]))).kappa == 1.0
        assert score_confusion(ConfusionMatrix(np.array([[6, 4], [0, 0]]))).kappa == 0.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            score_confusion(ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    def test_id_range_validated(self):
        with pytest.raises(ValueError):
            ConfusionMatrix.from_predictions([0, 1], [1, 1], 2)
        with pytest.raises(ValueError):
            ConfusionMatrix.from_predictions([1, 1], [1, 3], 2)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(2, 6))
    def test_permutation_invariance(self, seed, k):
        rng = np.random.default_rng(seed)
        y_true = rng.integers(1, k + 1, size=200)
        y_pred = rng.integers(1, k + 1, size=200)
        base = score_confusion(ConfusionMatrix.from_predictions(y_true, y_pred, k))
        perm = rng.permutation(k) + 1
        s = score_confusion(
            ConfusionMatrix.from_predictions(perm[y_true - 1], perm[y_pred - 1], k)
        )
        assert s.oa == pytest.approx(base.oa, abs=1e-12)
        assert s.aa == pytest.approx(base.aa, abs=1e-12)
        assert s.kappa == pytest.approx(base.kappa, abs=1e-12)
        assert s.mf1 == pytest.approx(base.mf1, abs=1e-12)
        assert s.miou == pytest.approx(base.miou, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_score_ranges(self, seed):
        rng = np.random.default_rng(seed)
        counts = rng.integers(0, 30, size=(4, 4))
        counts[rng.integers(0, 4)] += 1  # ensure non-empty
        s = score_confusion(ConfusionMatrix(counts))
        assert 0.0 <= s.oa <= 1.0
        assert 0.0 <= s.aa <= 1.0
        assert -1.0 <= s.kappa <= 1.0


class TestDenseEvaluation:
    def test_gathers_at_label_coordinates(self):
        class_map = np.array([[1, 2], [2, 1]])
        labels = SparseLabelSet(
            rows=np.array([0, 0, 1]),
            cols=np.array([0, 1, 0]),
            classes=np.array([1, 1, 2]),
            num_classes=2,
            split="test",
        )
        cm = evaluate_dense(class_map, labels)
        np.testing.assert_array_equal(cm.counts, np.array([[1, 1], [0, 1]]))

    def test_bounds_checked(self):
        labels = SparseLabelSet(
            rows=np.array([5]), cols=np.array([0]), classes=np.array([1]),
            num_classes=1, split="test",
        )
        with pytest.raises(ValueError):
            evaluate_dense(np.ones((2, 2), dtype=int), labels)


class TestReports:
    def test_text_report_values(self):
        report = format_report(HAND, ["water", "urban"])
        assert "water" in report and "urban" in report
        assert "85.00" in report  # OA
        assert "86.96" in report  # class-1 f1
        assert "69.39" in report  # kappa in percent
        for footer in ("OA", "AA", "Kappa", "mF1", "mIoU"):
            assert footer in report

    def test_csv_report_shape(self):
        csv_text = report_csv(HAND, ["water", "urban"])
        lines = csv_text.strip().splitlines()
        assert lines[0] == "class,recall,precision,f1,iou"
        assert lines[1].startswith("water,83.33,90.91,86.96,76.92")
        assert lines[-5] == "OA,85.00"
        assert lines[-3] == "Kappa,69.39"

    def test_absent_class_rendered(self):
        cm = ConfusionMatrix(np.array([[4, 0, 0], [0, 5, 0], [0, 0, 0]]))
        assert "absent" in format_report(cm)
        assert ",absent," in report_csv(cm)

    def test_seven_class_header(self):
        rng = np.random.default_rng(0)
        counts = rng.integers(1, 20, size=(7, 7))
        names = [
            "forest", "residential", "industrial", "low_plants",
            "allotment", "commercial", "water",
        ]
        report = format_report(ConfusionMatrix(counts), names)
        assert all(n in report for n in names)
        with pytest.raises(ValueError):
            format_report(ConfusionMatrix(counts), names[:5])
