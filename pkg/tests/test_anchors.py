import json
import math

import numpy as np
import pytest

from detforge.anchors import (
    AnchorSpec,
    cluster_anchor_sizes,
    generate_anchors,
    match_anchors,
    sweep_k,
)
from detforge.annotations import Instance
from detforge.errors import TooFewBoxes, ValidationError
from detforge.geometry import BBox, BoxWH, from_xywh, iou_matrix, wh_iou_matrix
from detforge.synthetic import synthetic_aerial_corpus


class TestAnchorSpec:
    def test_defaults_are_valid(self):
        spec = AnchorSpec()
        assert len(spec.sizes) == len(spec.strides) == 5

    def test_angles_fold_onto_half_circle(self):
        assert AnchorSpec().effective_angles == (0.0, 90.0)
        assert AnchorSpec(angles=(0.0,)).effective_angles == (0.0,)
        assert AnchorSpec(angles=(180.0,)).effective_angles == (0.0,)
        assert AnchorSpec(angles=(270.0, 90.0)).effective_angles == (90.0,)

    def test_sizes_at_level(self):
        spec = AnchorSpec(sizes=(8, 16), strides=(4, 8))
        assert spec.sizes_at(0) == (8.0,)
        assert spec.sizes_at(1) == (16.0,)
        shared = AnchorSpec(sizes=(8, 16, 32), strides=(4, 8), shared_sizes=True)
        assert shared.sizes_at(1) == (8.0, 16.0, 32.0)

    def test_rejects_bad_values(self):
        with pytest.raises(ValidationError):
            AnchorSpec(sizes=(0.0,), strides=(4,))
        with pytest.raises(ValidationError):
            AnchorSpec(aspect_ratios=(1.0, -2.0))
        with pytest.raises(ValidationError):
            AnchorSpec(angles=(45.0,))
        with pytest.raises(ValidationError):
            AnchorSpec(offset=1.0)
        with pytest.raises(ValidationError):
            AnchorSpec(sizes=(16, 32), strides=(4, 8, 16))


class TestGenerateAnchors:
    def test_two_by_two_grid(self):
        spec = AnchorSpec(sizes=(16,), aspect_ratios=(1.0,), angles=(0.0,), strides=(4,))
        out = generate_anchors(spec, [(2, 2)])
        level = out.levels[0]
        assert out.total == 4
        np.testing.assert_array_equal(level.boxes[0], [-6.0, -6.0, 10.0, 10.0])
        # row-major walk, y outer
        assert level.cells.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]
        centers = (level.boxes[:, :2] + level.boxes[:, 2:]) / 2.0
        assert centers.tolist() == [[2, 2], [6, 2], [2, 6], [6, 6]]

    def test_ratio_family_preserves_area(self):
        spec = AnchorSpec(sizes=(16,), aspect_ratios=(0.5, 1.0, 2.0), angles=(0.0,), strides=(4,))
        out = generate_anchors(spec, [(1, 1)])
        boxes = out.levels[0].boxes
        assert boxes.shape[0] == 3
        w = boxes[:, 2] - boxes[:, 0]
        h = boxes[:, 3] - boxes[:, 1]
        np.testing.assert_allclose(w * h, 256.0, rtol=1e-9)
        assert sorted((h / w).round(9).tolist()) == [0.5, 1.0, 2.0]

    def test_right_angles_collapse_to_one_swap(self):
        spec = AnchorSpec(sizes=(16,), aspect_ratios=(2.0,), angles=(-90.0, 0.0, 90.0), strides=(4,))
        out = generate_anchors(spec, [(1, 1)])
        boxes = out.levels[0].boxes
        assert boxes.shape[0] == 2
        w = boxes[:, 2] - boxes[:, 0]
        h = boxes[:, 3] - boxes[:, 1]
        # the 90-degree anchor is the 0-degree one with sides swapped
        assert w[1] == pytest.approx(h[0], rel=1e-12)
        assert h[1] == pytest.approx(w[0], rel=1e-12)

    def test_count_formula_per_level(self):
        spec = AnchorSpec()
        dims = [(math.ceil(256 / s), math.ceil(256 / s)) for s in spec.strides]
        out = generate_anchors(spec, dims)
        for level, (fw, fh) in zip(out.levels, dims):
            expected = fw * fh * 1 * len(spec.aspect_ratios) * len(spec.effective_angles)
            assert level.count == expected
        assert out.total == sum(lv.count for lv in out.levels)

    def test_shared_sizes_multiplies_the_count(self):
        spec = AnchorSpec(shared_sizes=True)
        out = generate_anchors(spec, [(4, 4)] * 5)
        assert out.levels[0].count == 4 * 4 * 5 * 3 * 2

    def test_size_and_ratio_hold_for_every_anchor(self):
        spec = AnchorSpec()
        dims = [(math.ceil(192 / s), math.ceil(160 / s)) for s in spec.strides]
        out = generate_anchors(spec, dims)
        for level in out.levels:
            w = level.boxes[:, 2] - level.boxes[:, 0]
            h = level.boxes[:, 3] - level.boxes[:, 1]
            np.testing.assert_allclose(w * h, level.sizes**2, rtol=1e-6)
            measured = np.where(level.angles == 0.0, h / w, w / h)
            np.testing.assert_allclose(measured, level.ratios, rtol=1e-9)

    def test_offset_moves_the_center(self):
        spec = AnchorSpec(sizes=(16,), aspect_ratios=(1.0,), angles=(0.0,), strides=(4,), offset=0.0)
        out = generate_anchors(spec, [(1, 1)])
        np.testing.assert_array_equal(out.levels[0].boxes[0], [-8.0, -8.0, 8.0, 8.0])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            generate_anchors(AnchorSpec(), [(10, 10)])
        spec = AnchorSpec(sizes=(16,), strides=(4,))
        with pytest.raises(ValidationError):
            generate_anchors(spec, [(0, 4)])

    def test_all_boxes_concatenates_levels(self):
        spec = AnchorSpec(sizes=(16, 32), aspect_ratios=(1.0,), angles=(0.0,), strides=(4, 8))
        out = generate_anchors(spec, [(2, 2), (1, 1)])
        assert out.all_boxes().shape == (5, 4)


class TestClustering:
    def test_one_centroid_per_box_is_perfect(self):
        boxes = [BoxWH(10, 20), BoxWH(30, 15), BoxWH(50, 50)]
        result = cluster_anchor_sizes(boxes, k=3, seed=0)
        assert result.mean_iou == 1.0
        assert sorted((c.w, c.h) for c in result.centroids) == sorted(
            (b.w, b.h) for b in boxes
        )

    def test_two_separable_blobs(self):
        boxes = [BoxWH(10, 10)] * 5 + [BoxWH(100, 100)] * 5
        result = cluster_anchor_sizes(boxes, k=2, seed=0)
        assert [(c.w, c.h) for c in result.centroids] == [(10.0, 10.0), (100.0, 100.0)]
        assert result.mean_iou == 1.0
        # area-ascending centroid order puts the small blob first
        assert result.assignments.tolist() == [0] * 5 + [1] * 5

    def test_degenerate_identical_boxes(self):
        result = cluster_anchor_sizes([BoxWH(7, 7)] * 5, k=2, seed=0)
        assert result.mean_iou == 1.0
        assert set(result.assignments.tolist()) <= {0, 1}

    def test_assignments_maximize_iou(self):
        corpus = synthetic_aerial_corpus(n=200, seed=5)
        result = cluster_anchor_sizes(corpus, k=4, seed=1, restarts=3)
        wh = np.array([(b.w, b.h) for b in corpus])
        cents = np.array([(c.w, c.h) for c in result.centroids])
        iou = wh_iou_matrix(wh, cents)
        chosen = iou[np.arange(len(wh)), result.assignments]
        np.testing.assert_allclose(chosen, iou.max(axis=1), rtol=0, atol=1e-15)

    def test_reported_mean_iou_matches_recomputation(self):
        corpus = synthetic_aerial_corpus(n=150, seed=6)
        result = cluster_anchor_sizes(corpus, k=3, seed=2)
        wh = np.array([(b.w, b.h) for b in corpus])
        cents = np.array([(c.w, c.h) for c in result.centroids])
        again = wh_iou_matrix(wh, cents)[np.arange(len(wh)), result.assignments].mean()
        assert abs(result.mean_iou - again) <= 1e-12

    def test_centroids_sorted_by_area(self):
        corpus = synthetic_aerial_corpus(n=300, seed=9)
        result = cluster_anchor_sizes(corpus, k=5, seed=0)
        areas = [c.w * c.h for c in result.centroids]
        assert areas == sorted(areas)

    def test_deterministic_for_fixed_seed(self):
        corpus = synthetic_aerial_corpus(n=120, seed=8)
        a = cluster_anchor_sizes(corpus, k=4, seed=3).to_dict()
        b = cluster_anchor_sizes(corpus, k=4, seed=3).to_dict()
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_more_restarts_never_hurt(self):
        corpus = synthetic_aerial_corpus(n=250, seed=10)
        one = cluster_anchor_sizes(corpus, k=4, seed=0, restarts=1).mean_iou
        ten = cluster_anchor_sizes(corpus, k=4, seed=0, restarts=10).mean_iou
        assert ten >= one

    def test_array_input_matches_box_input(self):
        corpus = synthetic_aerial_corpus(n=80, seed=12)
        arr = np.array([(b.w, b.h) for b in corpus])
        a = cluster_anchor_sizes(corpus, k=3, seed=4).to_dict()
        b = cluster_anchor_sizes(arr, k=3, seed=4).to_dict()
        assert a == b

    def test_random_init_is_available(self):
        corpus = synthetic_aerial_corpus(n=100, seed=13)
        result = cluster_anchor_sizes(corpus, k=3, seed=0, init="random")
        assert 0.0 < result.mean_iou <= 1.0

    def test_greedy_assignment_beats_any_other_labeling(self):
        """With centroids held fixed, max-IoU assignment is optimal."""
        rng = np.random.default_rng(20)
        wh = rng.uniform(1.0, 120.0, size=(60, 2))
        cents = rng.uniform(1.0, 120.0, size=(4, 2))
        iou = wh_iou_matrix(wh, cents)
        best = iou.max(axis=1).mean()
        for _ in range(25):
            shuffled = iou[np.arange(60), rng.integers(0, 4, size=60)].mean()
            assert best >= shuffled

    def test_too_few_boxes(self):
        with pytest.raises(TooFewBoxes):
            cluster_anchor_sizes([BoxWH(5, 5)], k=2)

    def test_rejects_bad_parameters(self):
        boxes = [BoxWH(5, 5), BoxWH(9, 9)]
        with pytest.raises(ValidationError):
            cluster_anchor_sizes(boxes, k=0)
        with pytest.raises(ValidationError):
            cluster_anchor_sizes(boxes, k=1, restarts=0)
        with pytest.raises(ValidationError):
            cluster_anchor_sizes(boxes, k=1, init="medoid")


class TestSweep:
    def test_single_k_identical_boxes(self):
        assert sweep_k([BoxWH(4, 4)] * 3, [1]) == [(1, 1.0)]

    def test_two_blobs_improve_with_second_centroid(self):
        boxes = [BoxWH(10, 10)] * 5 + [BoxWH(100, 100)] * 5
        pairs = sweep_k(boxes, [1, 2], seed=0)
        assert pairs[0][0] == 1 and pairs[1][0] == 2
        assert pairs[1][1] > pairs[0][1]

    def test_output_sorted_even_for_unsorted_range(self):
        corpus = synthetic_aerial_corpus(n=60, seed=14)
        pairs = sweep_k(corpus, [3, 1, 2], seed=0, restarts=2)
        assert [k for k, _ in pairs] == [1, 2, 3]

    def test_empty_range_rejected(self):
        with pytest.raises(ValidationError):
            sweep_k([BoxWH(4, 4)], [])


def small_grid(size=16, stride=4, fmap=(4, 4)):
    spec = AnchorSpec(sizes=(size,), aspect_ratios=(1.0,), angles=(0.0,), strides=(stride,))
    return generate_anchors(spec, [fmap])


def gt(inst_id, image_id, cat, x0, y0, x1, y1, ignore=False):
    box = BBox(float(x0), float(y0), float(x1), float(y1))
    return Instance(inst_id, image_id, cat, box, box.area, ignore)


class TestMatching:
    def test_anchor_shaped_gt_is_recalled_at_threshold_one(self):
        anchors = small_grid()
        # cell (1, 1) center (6, 6): the 16x16 anchor there spans [-2, 14]
        report = match_anchors(anchors, [gt(1, 1, 1, -2, -2, 14, 14)], pos_iou=1.0, neg_iou=0.3)
        assert report.recall == 1.0
        assert report.n_gt == 1
        assert report.unmatched_gt_ids == ()

    def test_counts_partition_the_anchor_set(self):
        anchors = small_grid()
        gts = [gt(1, 1, 1, 0, 0, 16, 16), gt(2, 1, 2, 4, 4, 12, 12)]
        report = match_anchors(anchors, gts, pos_iou=0.5, neg_iou=0.2)
        assert report.n_positive + report.n_negative + report.n_ignored == report.n_anchors
        assert report.n_anchors == anchors.total

    def test_two_images_double_the_anchor_total(self):
        anchors = small_grid()
        gts = [gt(1, 1, 1, 0, 0, 16, 16), gt(2, 2, 1, 0, 0, 16, 16)]
        report = match_anchors(anchors, gts, pos_iou=0.5, neg_iou=0.2)
        assert report.n_anchors == 2 * anchors.total

    def test_no_ground_truth_convention(self):
        anchors = small_grid()
        report = match_anchors(anchors, [])
        assert report.recall == 1.0
        assert report.zero_gt_denominator is True
        assert report.n_negative == report.n_anchors == anchors.total

    def test_zero_positive_threshold_claims_everything(self):
        anchors = small_grid()
        report = match_anchors(anchors, [gt(1, 1, 1, 0, 0, 8, 8)], pos_iou=0.0, neg_iou=0.0)
        assert report.n_positive == report.n_anchors

    def test_threshold_order_enforced(self):
        anchors = small_grid()
        gts = [gt(1, 1, 1, 0, 0, 8, 8)]
        with pytest.raises(ValidationError):
            match_anchors(anchors, gts, pos_iou=0.3, neg_iou=0.7)
        with pytest.raises(ValidationError):
            match_anchors(anchors, gts, pos_iou=1.2, neg_iou=0.3)

    def test_force_match_rescues_a_stranded_gt(self):
        anchors = small_grid()
        stranded = gt(1, 1, 1, 0, 0, 3, 3)  # IoU with every 16x16 anchor is tiny
        plain = match_anchors(anchors, [stranded], pos_iou=0.7, neg_iou=0.3)
        assert plain.recall == 0.0
        assert plain.unmatched_gt_ids == (1,)

        forced = match_anchors(anchors, [stranded], pos_iou=0.7, neg_iou=0.3, force_match=True)
        assert forced.recall == 1.0
        assert forced.n_positive == plain.n_positive + 1
        assert forced.matched_per_gt == {1: 1}

    def test_ignore_gt_neither_counts_nor_pollutes_negatives(self):
        anchors = small_grid()
        crowd = gt(1, 1, 1, -2, -2, 14, 14, ignore=True)
        live = gt(2, 1, 1, 0, 0, 16, 16)
        report = match_anchors(anchors, [crowd, live], pos_iou=0.99, neg_iou=0.3)
        assert report.n_gt == 1
        # anchors overlapping the crowd region sit out instead of training as background
        assert report.n_ignored > 0
        assert report.n_positive + report.n_negative + report.n_ignored == report.n_anchors

    def test_matched_histogram_accounts_for_every_gt(self):
        anchors = small_grid()
        gts = [gt(1, 1, 1, 0, 0, 16, 16), gt(2, 1, 2, 30, 30, 46, 46), gt(3, 2, 1, 1, 1, 2, 2)]
        report = match_anchors(anchors, gts, pos_iou=0.5, neg_iou=0.2)
        assert sum(report.matched_per_gt.values()) == report.n_gt == 3

    def test_per_class_recall_splits_by_category(self):
        anchors = small_grid()
        gts = [gt(1, 1, 1, 0, 0, 16, 16), gt(2, 1, 2, 1, 1, 3, 3)]
        report = match_anchors(anchors, gts, pos_iou=0.5, neg_iou=0.2)
        assert report.per_class_recall == {1: 1.0, 2: 0.0}
        assert report.recall == 0.5

    def test_small_anchor_size_recalls_small_objects(self):
        """A 16-anchor grid recovers a 14x14 box that a 32 grid cannot."""
        target = [gt(1, 1, 1, 30, 30, 44, 44)]
        fine = match_anchors(small_grid(size=16, fmap=(16, 16)), target, pos_iou=0.5, neg_iou=0.3)
        coarse = match_anchors(small_grid(size=32, fmap=(16, 16)), target, pos_iou=0.5, neg_iou=0.3)
        assert fine.recall == 1.0
        assert coarse.recall == 0.0

    def test_agrees_with_direct_reimplementation(self):
        rng = np.random.default_rng(33)
        anchors = small_grid(size=12, stride=6, fmap=(5, 5))
        boxes = anchors.all_boxes()
        for trial in range(10):
            gts = []
            for i in range(int(rng.integers(1, 8))):
                x0, y0 = rng.uniform(0, 24, size=2)
                w, h = rng.uniform(2, 18, size=2)
                gts.append(
                    gt(i + 1, int(rng.integers(1, 3)), 1, x0, y0, x0 + w, y0 + h,
                       ignore=bool(rng.random() < 0.2))
                )
            pos_thr, neg_thr = 0.5, 0.3
            report = match_anchors(anchors, gts, pos_iou=pos_thr, neg_iou=neg_thr)

            n_pos = n_neg = n_ign = 0
            recalled = 0
            n_live = 0
            for image_id in {g.image_id for g in gts}:
                live = [g for g in gts if g.image_id == image_id and not g.ignore]
                crowd = [g for g in gts if g.image_id == image_id and g.ignore]
                if live:
                    iou = iou_matrix(boxes, np.array([g.bbox.as_tuple() for g in live]))
                    best = iou.max(axis=1)
                    recalled += int(((iou >= pos_thr).sum(axis=0) >= 1).sum())
                    n_live += len(live)
                else:
                    iou = np.zeros((boxes.shape[0], 0))
                    best = np.zeros(boxes.shape[0])
                pos = best >= pos_thr
                neg = ~pos & (best < neg_thr)
                if crowd.__len__() and neg.any():
                    ign_best = iou_matrix(
                        boxes, np.array([g.bbox.as_tuple() for g in crowd])
                    ).max(axis=1)
                    neg &= ign_best < neg_thr
                n_pos += int(pos.sum())
                n_neg += int(neg.sum())
                n_ign += boxes.shape[0] - int(pos.sum()) - int(neg.sum())

            assert report.n_positive == n_pos
            assert report.n_negative == n_neg
            assert report.n_ignored == n_ign
            if n_live:
                assert report.recall == recalled / n_live

    def test_report_serializes_with_string_keys(self):
        anchors = small_grid()
        report = match_anchors(anchors, [gt(1, 1, 1, 0, 0, 16, 16)], pos_iou=0.5, neg_iou=0.2)
        blob = json.loads(json.dumps(report.to_dict()))
        assert blob["n_anchors"] == anchors.total
        assert all(isinstance(k, str) for k in blob["per_class_recall"])
        assert all(isinstance(k, str) for k in blob["matched_per_gt"])
