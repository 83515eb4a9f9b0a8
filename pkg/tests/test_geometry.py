import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from antiuav.geometry import (
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    BoundingBox,
    EvalCurve,
    FrameState,
    PredictionState,
    average_curves,
    center_distance,
    iou,
    mean_state_accuracy,
    precision_at,
    precision_curve,
    scale,
    state_accuracy,
    success_curve,
)
from helpers import as_tuples, random_box, random_sequence
from oracles import counting_precision, counting_success, loop_state_accuracy, raster_iou

A = BoundingBox(0, 0, 10, 10)
B = BoundingBox(5, 5, 15, 15)

coord = st.integers(min_value=0, max_value=40)


@st.composite
def int_boxes(draw):
    x1, x2 = sorted((draw(coord), draw(coord)))
    y1, y2 = sorted((draw(coord), draw(coord)))
    return BoundingBox(x1, y1, x2, y2)


class TestBoundingBox:
    def test_properties(self):
        b = BoundingBox(2, 3, 8, 11)
        assert (b.width, b.height, b.area) == (6.0, 8.0, 48.0)
        assert b.center == (5.0, 7.0)
        assert b.shift(1, -1).as_list() == [3.0, 2.0, 9.0, 10.0]
        assert BoundingBox.from_center(5, 7, 6, 8) == b

    def test_coordinates_are_python_floats(self):
        b = BoundingBox(np.float32(1), np.int64(2), 3, 4)
        assert all(type(v) is float for v in b.as_list())

    @pytest.mark.parametrize("coords", [(5, 0, 4, 1), (0, 5, 1, 4), (0, 0, math.nan, 1), (0, 0, math.inf, 1)])
    def test_invalid(self, coords):
        with pytest.raises(ValueError):
            BoundingBox(*coords)

    def test_frame_state_requires_box_iff_exist(self):
        with pytest.raises(ValueError):
            FrameState(True)
        with pytest.raises(ValueError):
            FrameState(False, A)
        with pytest.raises(ValueError):
            PredictionState(True)


class TestIoU:
    @pytest.mark.parametrize(
        "a, b, expected",
        [
            (A, A, 1.0),
            (A, B, 25 / 175),
            (A, BoundingBox(10, 0, 20, 10), 0.0),  # edge contact
            (A, BoundingBox(20, 20, 30, 30), 0.0),
            (A, BoundingBox(2, 2, 4, 4), 4 / 100),  # containment
            (BoundingBox(3, 3, 3, 3), BoundingBox(3, 3, 3, 3), 0.0),  # degenerate
        ],
    )
    def test_known_values(self, a, b, expected):
        assert iou(a, b) == pytest.approx(expected, abs=1e-15)

    def test_matches_raster_oracle(self, rng):
        for _ in range(300):
            a = rng.integers(0, 30, size=4)
            b = rng.integers(0, 30, size=4)
            a = [min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3])]
            b = [min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3])]
            assert abs(iou(BoundingBox(*a), BoundingBox(*b)) - raster_iou(a, b)) < 1e-9

    @settings(max_examples=200, deadline=None)
    @given(int_boxes(), int_boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(int_boxes(), int_boxes(), st.integers(-20, 20), st.integers(-20, 20))
    def test_translation_invariant(self, a, b, dx, dy):
        assert iou(a.shift(dx, dy), b.shift(dx, dy)) == pytest.approx(iou(a, b), abs=1e-12)


def test_center_distance_and_scale():
    assert center_distance(A, B) == pytest.approx(math.sqrt(50))
    assert scale(BoundingBox(0, 0, 4, 9)) == 6.0


class TestStateAccuracy:
    def test_frozen_example(self):
        gt = [FrameState(True, A), FrameState(True, A), FrameState(False), FrameState(False)]
        pred = [PredictionState(True, A), PredictionState(False), PredictionState(False), PredictionState(True, B)]
        # 1 (exact) + 0 (declared absent while visible) + 1 (correct absence) + 0 (false presence)
        assert state_accuracy(pred, gt) == 0.5

    def test_partial_overlap(self):
        gt = [FrameState(True, A), FrameState(False)]
        pred = [PredictionState(True, B), PredictionState(False)]
        assert state_accuracy(pred, gt) == pytest.approx((25 / 175 + 1) / 2, abs=1e-15)

    def test_perfect_tracking_is_exactly_one(self, rng):
        gt = [FrameState(True, random_box(rng)) for _ in range(50)] + [FrameState(False)] * 5
        pred = [PredictionState(g.exist, g.box) for g in gt]
        assert state_accuracy(pred, gt) == 1.0

    def test_all_invisible_always_absent(self):
        assert state_accuracy([PredictionState(False)] * 7, [FrameState(False)] * 7) == 1.0

    def test_visible_absence_scores_zero(self):
        assert state_accuracy([PredictionState(False)], [FrameState(True, A)]) == 0.0

    @pytest.mark.parametrize("length", [1, 2, 17, 200])
    def test_matches_loop_oracle(self, rng, length):
        for _ in range(20):
            pred, gt = random_sequence(rng, length)
            assert abs(state_accuracy(pred, gt) - loop_state_accuracy(as_tuples(pred), as_tuples(gt))) < 1e-12

    def test_rejects_misaligned_and_empty(self):
        with pytest.raises(ValueError, match="length mismatch"):
            state_accuracy([PredictionState(False)], [])
        with pytest.raises(ValueError, match="empty"):
            state_accuracy([], [])

    def test_mean_state_accuracy(self):
        assert mean_state_accuracy([0.2, 0.4, 0.9]) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            mean_state_accuracy([])


class TestCurves:
    def test_thresholds(self):
        assert PRECISION_THRESHOLDS[0] == 0 and PRECISION_THRESHOLDS[-1] == 50 and len(PRECISION_THRESHOLDS) == 51
        assert len(SUCCESS_THRESHOLDS) == 21 and SUCCESS_THRESHOLDS[10] == 0.5

    def test_precision_inclusive_at_threshold(self):
        gt = [FrameState(True, A)] * 3
        pred = [PredictionState(True, A), PredictionState(True, A.shift(20, 0)),
                PredictionState(True, A.shift(20.001, 0))]
        c = precision_curve(pred, gt)
        assert precision_at(c, 20) == pytest.approx(2 / 3)
        assert c.values[0] == pytest.approx(1 / 3)

    def test_precision_ignores_absent_and_invisible(self):
        gt = [FrameState(True, A), FrameState(True, A), FrameState(False)]
        pred = [PredictionState(True, A), PredictionState(False), PredictionState(True, B)]
        assert precision_at(precision_curve(pred, gt)) == 1.0

    def test_success_strict_and_absence_counts_zero(self):
        half = BoundingBox(0, 0, 10, 5)  # IoU with A is exactly 0.5
        gt = [FrameState(True, A), FrameState(True, A), FrameState(False)]
        pred = [PredictionState(True, half), PredictionState(False), PredictionState(False)]
        c = success_curve(pred, gt)
        assert c.values[0] == 0.5  # 0.5 > 0 counts, absent frame does not
        assert c.values[10] == 0.0  # 0.5 > 0.5 is false

    def test_empty_curves(self):
        c = precision_curve([PredictionState(False)], [FrameState(False)])
        assert c.empty and c.auc == 0.0

    def test_match_counting_oracles(self, rng):
        for _ in range(30):
            pred, gt = random_sequence(rng, int(rng.integers(1, 80)))
            p, g = as_tuples(pred), as_tuples(gt)
            pc = precision_curve(pred, gt)
            sc = success_curve(pred, gt)
            for t, v in zip(pc.thresholds, pc.values):
                assert v == pytest.approx(counting_precision(p, g, t), abs=1e-12)
            for t, v in zip(sc.thresholds, sc.values):
                assert v == pytest.approx(counting_success(p, g, t), abs=1e-12)
            assert sc.auc == pytest.approx(np.mean(sc.values))

    def test_average_skips_empty(self):
        t = np.array([0.0, 1.0])
        full = EvalCurve(t, [1.0, 0.5], 0.75)
        empty = EvalCurve(t, [0.0, 0.0], 0.0, empty=True)
        avg = average_curves([full, empty, EvalCurve(t, [0.0, 0.5], 0.25)])
        assert avg.values.tolist() == [0.5, 0.5]

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            EvalCurve([1.0, 0.0], [0.0, 0.0], 0.0)
        with pytest.raises(ValueError):
            precision_at(EvalCurve([0.0, 1.0], [0.0, 0.0], 0.0), 20)
