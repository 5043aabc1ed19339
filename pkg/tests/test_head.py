"""Prediction head: target assignment, loss behavior, decoding, and the toy
AP metric against hand-computed values."""

import math

import numpy as np
import pytest

from dyhead.head import (
    GroundTruth,
    HeadOutputs,
    assign_targets,
    average_precision,
    box_iou,
    decode_and_eval,
    decode_predictions,
    init_head_params,
    level_size_ranges,
    loss,
    nms,
    predict,
    smooth_l1,
)
from dyhead.tensor import Tensor, gradcheck


def make_outputs(L, H, W, ncls, fill_cls=-10.0, fill_ctr=0.0, fill_box=0.0):
    return HeadOutputs(
        cls_logits=Tensor(np.full((L, H, W, ncls), fill_cls)),
        centerness=Tensor(np.full((L, H, W, 1), fill_ctr)),
        box_deltas=Tensor(np.full((L, H, W, 4), fill_box)),
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

class TestPredict:
    def test_matches_manual_linear(self):
        rng = np.random.default_rng(0)
        F = Tensor(rng.normal(size=(2, 4, 4, 8)))
        p = init_head_params(8, 3, rng)
        out = predict(F, p)
        ref_cls = F.numpy() @ p.cls_weight.numpy() + p.cls_bias.numpy()
        np.testing.assert_allclose(out.cls_logits.numpy(), ref_cls, rtol=1e-12)
        assert out.centerness.shape == (2, 4, 4, 1)
        assert out.box_deltas.shape == (2, 4, 4, 4)

    def test_classification_prior_at_init(self):
        rng = np.random.default_rng(1)
        p = init_head_params(8, 3, rng)
        F = Tensor(np.zeros((1, 2, 2, 8)))
        prob = 1.0 / (1.0 + np.exp(-predict(F, p).cls_logits.numpy()))
        np.testing.assert_allclose(prob, 0.01, rtol=1e-10)


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------

class TestAssignment:
    def test_level_ranges(self):
        assert level_size_ranges(3) == [(0.0, 4.0), (4.0, 8.0),
                                        (8.0, math.inf)]
        assert level_size_ranges(1) == [(0.0, math.inf)]

    def test_centerness_one_at_square_box_center(self):
        # box [2,2,10,10] centered on the position center (6,6) at stride 4
        gt = GroundTruth(boxes=[[2.0, 2.0, 10.0, 10.0]], classes=[0])
        tgt = assign_targets(gt, (4, 4), 1, 4, 4, 3)
        assert tgt.cls_index[0, 1, 1] == 0
        assert tgt.centerness[0, 1, 1] == pytest.approx(1.0)
        np.testing.assert_allclose(tgt.box_dist[0, 1, 1], [1.0, 1.0, 1.0, 1.0])

    def test_centerness_within_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x0, y0 = rng.uniform(0, 20, 2)
            w, h = rng.uniform(5, 40, 2)
            gt = GroundTruth(boxes=[[x0, y0, x0 + w, y0 + h]], classes=[0])
            tgt = assign_targets(gt, (16, 16), 3, 4, 4, 3)
            assert np.all(tgt.centerness >= 0.0)
            assert np.all(tgt.centerness <= 1.0 + 1e-12)

    def test_positions_outside_box_stay_background(self):
        gt = GroundTruth(boxes=[[0.0, 0.0, 8.0, 8.0]], classes=[1])
        tgt = assign_targets(gt, (4, 4), 1, 4, 4, 3)
        assert tgt.cls_index[0, 0, 0] == 1
        assert tgt.cls_index[0, 3, 3] == -1
        assert tgt.num_pos == 4          # the 2x2 block of contained centers

    def test_level_routing_by_box_size(self):
        # max sides 6 / 20 / 40 px at base stride 4 -> 1.5 / 5 / 10 units,
        # landing in ranges (0,4), (4,8), (8,inf) respectively
        gt = GroundTruth(
            boxes=[[0, 0, 6, 6], [10, 10, 30, 26], [0, 20, 40, 50]],
            classes=[0, 1, 2])
        tgt = assign_targets(gt, (16, 16), 3, 4, 4, 3)
        per_level = [set(np.unique(tgt.cls_index[l])) - {-1} for l in range(3)]
        assert per_level[0] == {0}
        assert per_level[1] == {1}
        assert per_level[2] == {2}

    def test_smallest_area_wins_overlap(self):
        big = [0.0, 0.0, 24.0, 24.0]
        small = [4.0, 4.0, 20.0, 20.0]
        gt = GroundTruth(boxes=[big, small], classes=[0, 1])
        tgt = assign_targets(gt, (8, 8), 1, 4, 4, 3)
        # position (3,3) center (14,14) inside both: small box must win
        assert tgt.cls_index[0, 3, 3] == 1

    def test_degenerate_and_out_of_range_boxes_skipped(self):
        gt = GroundTruth(boxes=[[5, 5, 5, 9], [0, 0, 8, 8], [1, 1, 7, 7]],
                         classes=[0, 7, 1])
        tgt = assign_targets(gt, (4, 4), 1, 4, 4, 3)
        assert tgt.num_skipped == 2

    def test_empty_gt(self):
        gt = GroundTruth(boxes=np.zeros((0, 4)), classes=np.zeros(0))
        tgt = assign_targets(gt, (4, 4), 2, 4, 4, 3)
        assert tgt.num_pos == 0
        assert np.all(tgt.cls_index == -1)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

class TestLoss:
    def _simple_targets(self):
        gt = GroundTruth(boxes=[[2.0, 2.0, 10.0, 10.0]], classes=[0])
        return assign_targets(gt, (4, 4), 1, 4, 4, 2)

    def test_nonnegative_and_finite(self):
        rng = np.random.default_rng(3)
        tgt = self._simple_targets()
        for _ in range(10):
            out = HeadOutputs(
                cls_logits=Tensor(rng.normal(scale=3, size=(1, 4, 4, 2))),
                centerness=Tensor(rng.normal(scale=3, size=(1, 4, 4, 1))),
                box_deltas=Tensor(rng.normal(scale=3, size=(1, 4, 4, 4))))
            val = loss(out, tgt).item()
            assert math.isfinite(val) and val >= 0.0

    def test_perfect_prediction_near_zero(self):
        tgt = self._simple_targets()
        big = 30.0
        cls = np.full((1, 4, 4, 2), -big)
        ll, yy, xx = np.nonzero(tgt.pos_mask)
        cls[ll, yy, xx, tgt.cls_index[ll, yy, xx]] = big
        ctr = np.zeros((1, 4, 4, 1))
        tc = np.clip(tgt.centerness[..., None], 1e-9, 1 - 1e-9)
        ctr[:] = np.log(tc / (1 - tc))
        box = np.where(tgt.box_dist > 0, np.log(np.maximum(tgt.box_dist, 1e-12)), 0.0)
        out = HeadOutputs(cls_logits=Tensor(cls), centerness=Tensor(ctr),
                          box_deltas=Tensor(box))
        assert loss(out, tgt).item() < 1e-8

    def test_no_positives_still_finite(self):
        gt = GroundTruth(boxes=np.zeros((0, 4)), classes=np.zeros(0))
        tgt = assign_targets(gt, (4, 4), 1, 4, 4, 2)
        out = make_outputs(1, 4, 4, 2)
        val = loss(out, tgt).item()
        assert math.isfinite(val) and val >= 0.0

    def test_gradients(self):
        rng = np.random.default_rng(4)
        tgt = self._simple_targets()
        zc = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True)
        zr = Tensor(rng.normal(size=(1, 4, 4, 1)), requires_grad=True)
        zb = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)

        def f(zc, zr, zb):
            return loss(HeadOutputs(cls_logits=zc, centerness=zr,
                                    box_deltas=zb), tgt)

        rep = gradcheck(f, [zc, zr, zb], max_entries=16, tol=1e-4)
        assert rep.passed, rep.max_errors

    def test_smooth_l1_values_and_continuity(self):
        beta = 0.2
        x = np.array([-1.0, -0.1, 0.0, 0.05, 0.5])
        out = smooth_l1(Tensor(x), beta).numpy()
        ref = np.where(np.abs(x) < beta, 0.5 * x ** 2 / beta,
                       np.abs(x) - 0.5 * beta)
        np.testing.assert_allclose(out, ref, rtol=1e-12)
        a = smooth_l1(Tensor(np.array([beta - 1e-9])), beta).item()
        b = smooth_l1(Tensor(np.array([beta + 1e-9])), beta).item()
        assert abs(a - b) < 1e-8


# ---------------------------------------------------------------------------
# Decoding / NMS / AP
# ---------------------------------------------------------------------------

class TestDecode:
    def test_box_iou_known_values(self):
        a = [[0, 0, 10, 10]]
        b = [[0, 0, 10, 10], [5, 5, 15, 15], [20, 20, 30, 30]]
        iou = box_iou(a, b).reshape(-1)
        np.testing.assert_allclose(iou, [1.0, 25.0 / 175.0, 0.0], rtol=1e-12)

    def test_nms_suppresses_overlaps(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]],
                         dtype=np.float64)
        scores = np.array([0.9, 0.8, 0.7])
        keep = nms(boxes, scores, 0.5)
        assert keep == [0, 2]

    def test_decode_single_strong_position(self):
        L, H, W, ncls = 1, 4, 4, 2
        out = make_outputs(L, H, W, ncls)
        out.cls_logits.data[0, 1, 2, 1] = 8.0
        out.centerness.data[0, 1, 2, 0] = 8.0
        out.box_deltas.data[0, 1, 2] = np.log([1.0, 1.0, 2.0, 2.0])
        boxes, scores, classes = decode_predictions(out, 4, score_thresh=0.5)
        assert len(scores) == 1
        assert classes[0] == 1
        # center (10, 6), distances (4, 4, 8, 8) px
        np.testing.assert_allclose(boxes[0], [6.0, 2.0, 18.0, 14.0], rtol=1e-12)

    def test_decode_empty_below_threshold(self):
        out = make_outputs(1, 4, 4, 2)
        boxes, scores, classes = decode_predictions(out, 4)
        assert len(boxes) == 0

    def test_box_clamp_survives_huge_logits(self):
        out = make_outputs(1, 2, 2, 1, fill_cls=10.0, fill_ctr=10.0,
                           fill_box=1e6)
        boxes, _, _ = decode_predictions(out, 4, score_thresh=0.5)
        assert np.all(np.isfinite(boxes))


class TestAveragePrecision:
    def test_empty_everything_is_perfect(self):
        assert average_precision([], 0) == 1.0

    def test_no_predictions_with_gt_is_zero(self):
        assert average_precision([], 3) == 0.0

    def test_predictions_without_gt_is_zero(self):
        assert average_precision([(0.9, False)], 0) == 0.0

    def test_hand_computed_three_pred_two_gt(self):
        # ranked records: TP(0.9), FP(0.8), TP(0.7) with 2 ground truths.
        #   rank  recall  precision
        #   1     0.5     1
        #   2     0.5     0.5
        #   3     1.0     2/3
        # all-point AP = 0.5 * 1 + 0.5 * 2/3 = 5/6
        ap = average_precision([(0.9, True), (0.8, False), (0.7, True)], 2)
        assert ap == pytest.approx(5.0 / 6.0)

    def test_decode_and_eval_matches_hand_case(self):
        gt = GroundTruth(boxes=[[0, 0, 10, 10], [20, 20, 30, 30]],
                         classes=[0, 0])
        preds = (np.array([[0, 0, 10, 10], [50, 50, 60, 60],
                           [20, 20, 30, 30]], dtype=np.float64),
                 np.array([0.9, 0.8, 0.7]),
                 np.array([0, 0, 0]))
        ap = decode_and_eval([preds], [gt], median_stride=4)
        assert ap == pytest.approx(5.0 / 6.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        gt = GroundTruth(boxes=[[0, 0, 10, 10], [20, 20, 30, 30]],
                         classes=[0, 1])
        boxes = np.array([[0, 0, 10, 10], [19, 19, 31, 31], [40, 40, 50, 50]],
                         dtype=np.float64)
        scores = np.array([0.9, 0.7, 0.5])
        classes = np.array([0, 1, 0])
        ref = decode_and_eval([(boxes, scores, classes)], [gt], 4)
        for _ in range(5):
            perm = rng.permutation(3)
            ap = decode_and_eval([(boxes[perm], scores[perm], classes[perm])],
                                 [gt], 4)
            assert ap == ref

    def test_class_mismatch_is_false_positive(self):
        gt = GroundTruth(boxes=[[0, 0, 10, 10]], classes=[0])
        preds = (np.array([[0, 0, 10, 10.0]]), np.array([0.9]), np.array([1]))
        assert decode_and_eval([preds], [gt], 4) == 0.0

    def test_duplicate_detections_count_once(self):
        gt = GroundTruth(boxes=[[0, 0, 10, 10]], classes=[0])
        preds = (np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]]),
                 np.array([0.9, 0.8]), np.array([0, 0]))
        # second hit on the same gt is a FP: AP = 1.0 (all recall at P=1)
        assert decode_and_eval([preds], [gt], 4) == pytest.approx(1.0)
