"""Metric tests with hand-computed expectations."""

import numpy as np
import pytest

from memvos import metrics


def square_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


class TestRegionSimilarity:
    def test_identical_masks(self):
        m = square_mask(16, 16, 4, 10, 4, 10)
        assert metrics.region_similarity(m, m) == 1.0

    def test_disjoint_masks(self):
        a = square_mask(16, 16, 0, 4, 0, 4)
        b = square_mask(16, 16, 8, 12, 8, 12)
        assert metrics.region_similarity(a, b) == 0.0

    def test_half_overlap_hand_value(self):
        # 4x4 squares sharing a 4x2 strip: inter 8, union 24
        a = square_mask(16, 16, 4, 8, 4, 8)
        b = square_mask(16, 16, 4, 8, 6, 10)
        assert metrics.region_similarity(a, b) == pytest.approx(8 / 24)

    def test_both_empty_is_perfect(self):
        z = np.zeros((8, 8), dtype=bool)
        assert metrics.region_similarity(z, z) == 1.0

    def test_one_empty_is_zero(self):
        z = np.zeros((8, 8), dtype=bool)
        m = square_mask(8, 8, 2, 5, 2, 5)
        assert metrics.region_similarity(z, m) == 0.0
        assert metrics.region_similarity(m, z) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.region_similarity(np.zeros((4, 4)), np.zeros((5, 5)))


class TestBoundary:
    def test_boundary_of_filled_square(self):
        m = square_mask(10, 10, 2, 7, 2, 7)  # 5x5 block
        b = metrics.mask_boundary(m)
        assert b.sum() == 16  # perimeter of a 5x5 block
        assert not b[4, 4]  # interior pixel excluded

    def test_frame_border_counts_as_boundary(self):
        m = np.ones((6, 6), dtype=bool)
        b = metrics.mask_boundary(m)
        assert b.sum() == 20  # only the outer ring

    def test_exact_match_scores_one(self):
        m = square_mask(16, 16, 4, 12, 4, 12)
        assert metrics.boundary_similarity(m, m, tolerance_px=0) == 1.0

    def test_small_shift_forgiven_within_tolerance(self):
        a = square_mask(32, 32, 8, 20, 8, 20)
        b = square_mask(32, 32, 9, 21, 8, 20)  # 1px vertical shift
        assert metrics.boundary_similarity(a, b, tolerance_px=2) == 1.0
        assert metrics.boundary_similarity(a, b, tolerance_px=0) < 1.0

    def test_empty_handling(self):
        z = np.zeros((8, 8), dtype=bool)
        m = square_mask(8, 8, 2, 5, 2, 5)
        assert metrics.boundary_similarity(z, z) == 1.0
        assert metrics.boundary_similarity(z, m) == 0.0

    def test_default_tolerance_uses_diagonal_fraction(self):
        # 500x500 frame: 0.8% of the diagonal is ~5.7px, so a 4px shift passes
        a = square_mask(500, 500, 100, 300, 100, 300)
        b = square_mask(500, 500, 104, 304, 100, 300)
        assert metrics.boundary_similarity(a, b) == 1.0
        # but at 64x64 the same default rounds to ~1px and a 4px shift fails
        c = square_mask(64, 64, 10, 40, 10, 40)
        d = square_mask(64, 64, 14, 44, 10, 40)
        assert metrics.boundary_similarity(c, d) < 1.0


class TestClipEvaluation:
    def test_perfect_prediction(self):
        gt = np.zeros((4, 16, 16), dtype=np.uint8)
        gt[:, 4:10, 4:10] = 1
        out = metrics.evaluate_masks(gt, gt, num_objects=1)
        assert out["region"] == 1.0 and out["boundary"] == 1.0

    def test_first_frame_skipped(self):
        gt = np.zeros((3, 16, 16), dtype=np.uint8)
        gt[:, 4:10, 4:10] = 1
        pred = gt.copy()
        pred[0] = 0  # ruined reference frame must not matter
        out = metrics.evaluate_masks(pred, gt, num_objects=1)
        assert out["region"] == 1.0

    def test_absent_object_scores_one_when_not_predicted(self):
        gt = np.zeros((3, 16, 16), dtype=np.uint8)
        gt[:, 2:6, 2:6] = 1  # object 2 never appears
        pred = gt.copy()
        out = metrics.evaluate_masks(pred, gt, num_objects=2)
        assert out["region"] == 1.0

    def test_summarize_means(self):
        per = [{"region": 0.8, "boundary": 0.6}, {"region": 1.0, "boundary": 0.8}]
        s = metrics.summarize(per)
        assert s["region"] == pytest.approx(0.9)
        assert s["boundary"] == pytest.approx(0.7)
        assert s["combined"] == pytest.approx(0.8)
