import numpy as np
import pytest

from oracles import brute_force_match, brute_force_pq, naive_miou
from panoptikit.errors import DataError, InvariantError, ShapeError
from panoptikit.metrics import (
    ClassMatches,
    SegmentMatch,
    compute_miou,
    compute_pq,
    match_segments,
)
from panoptikit.panio import PanopticMap, random_panoptic_map, perturb_panoptic_map


def pmap(class_rows, inst_rows=None):
    cm = np.asarray(class_rows, dtype=np.int32)
    im = np.zeros_like(cm) if inst_rows is None else np.asarray(inst_rows)
    return PanopticMap(cm, im)


def grid_fixture():
    """4x4 scene: stuff road (1) vs an 8-pixel thing car (5).

    Ground truth: car covers the top two rows. Prediction recovers six of
    those pixels (IoU 6/8) and paints everything else road (IoU 8/10).
    """
    g_cls = np.ones((4, 4), dtype=np.int32)
    g_cls[:2] = 5
    g_inst = np.where(g_cls == 5, 1, 0)
    p_cls = np.ones((4, 4), dtype=np.int32)
    p_cls[:2, :3] = 5
    p_inst = np.where(p_cls == 5, 1, 0)
    return pmap(p_cls, p_inst), pmap(g_cls, g_inst)


def sample_pairs(rng, classes, count, size=16):
    """Mixed dataset: exact copies, perturbations, independents, void scenes."""
    pairs = []
    for i in range(count):
        gt = random_panoptic_map(rng, size, size, classes, void_patch=i % 4 == 3)
        if i % 4 == 0:
            pred = gt
        elif i % 4 == 1:
            pred = perturb_panoptic_map(rng, gt, classes)
        else:
            pred = random_panoptic_map(rng, size, size, classes)
        pairs.append((pred, gt))
    return pairs


class TestMatchSegments:
    def test_identical_maps_all_tp_iou_one(self, rng, small_classes):
        gt = random_panoptic_map(rng, 16, 16, small_classes)
        m = match_segments(gt, gt, small_classes)
        assert m.per_class  # something to match
        for cm in m.per_class.values():
            assert cm.fp == () and cm.fn == ()
            for pred_key, gt_key, iou in cm.tp:
                assert pred_key == gt_key
                assert iou == 1.0

    def test_empty_prediction_is_one_fn(self, small_classes):
        g_cls = np.zeros((4, 4), dtype=np.int32)
        g_cls[:2, :2] = 5
        gt = pmap(g_cls, np.where(g_cls == 5, 1, 0))
        pred = pmap(np.zeros((4, 4), dtype=np.int32))
        m = match_segments(pred, gt, small_classes)
        assert m.per_class[5].tp == ()
        assert m.per_class[5].fp == ()
        assert m.per_class[5].fn == ((5, 1),)

    def test_partial_car_matches_at_three_quarters(self, small_classes):
        pred, gt = grid_fixture()
        m = match_segments(pred, gt, small_classes)
        assert m.per_class[5].tp == (((5, 1), (5, 1), 0.75),)
        assert m.per_class[1].tp[0][2] == pytest.approx(0.8, abs=1e-15)
        assert all(cm.fp == () and cm.fn == () for cm in m.per_class.values())

    def test_half_iou_is_not_a_match(self, small_classes):
        g_cls = np.zeros((4, 4), dtype=np.int32)
        g_cls[:2] = 5
        gt = pmap(g_cls, np.where(g_cls == 5, 1, 0))
        p_cls = np.zeros((4, 4), dtype=np.int32)
        p_cls[0] = 5  # four pixels inside the eight-pixel target: IoU 0.5
        pred = pmap(p_cls, np.where(p_cls == 5, 1, 0))
        m = match_segments(pred, gt, small_classes)
        assert m.per_class[5].tp == ()
        assert m.per_class[5].fp == ((5, 1),)
        assert m.per_class[5].fn == ((5, 1),)

    def test_void_pixels_leave_the_union(self, small_classes):
        # prediction spills onto ground-truth void: IoU must still be exact 1
        g_cls = np.zeros((4, 4), dtype=np.int32)
        g_cls[:2] = 5
        gt = pmap(g_cls, np.where(g_cls == 5, 1, 0))
        p_cls = np.zeros((4, 4), dtype=np.int32)
        p_cls[:3] = 5
        pred = pmap(p_cls, np.where(p_cls == 5, 1, 0))
        m = match_segments(pred, gt, small_classes)
        assert m.per_class[5].tp == (((5, 1), (5, 1), 1.0),)

    def test_majority_void_prediction_is_discarded(self, small_classes):
        g_cls = np.zeros((4, 4), dtype=np.int32)
        g_cls[3, :2] = 1
        gt = pmap(g_cls)
        p_cls = np.zeros((4, 4), dtype=np.int32)
        p_cls[0, :3] = 5  # three pixels, all on void
        pred = pmap(p_cls, np.where(p_cls == 5, 1, 0))
        m = match_segments(pred, gt, small_classes)
        assert 5 not in m.per_class  # neither TP nor FP

    def test_half_void_prediction_still_counts_as_fp(self, small_classes):
        g_cls = np.zeros((4, 4), dtype=np.int32)
        g_cls[0] = 1  # stuff row; the rest is void
        gt = pmap(g_cls)
        p_cls = np.zeros((4, 4), dtype=np.int32)
        p_cls[0, :2] = 5
        p_cls[1, :2] = 5  # half the segment on void: not a majority
        pred = pmap(p_cls, np.where(p_cls == 5, 1, 0))
        m = match_segments(pred, gt, small_classes)
        assert m.per_class[5].fp == ((5, 1),)

    def test_swapping_roles_swaps_fp_and_fn(self, rng, small_classes):
        for _ in range(5):
            a = random_panoptic_map(rng, 12, 12, small_classes)
            b = random_panoptic_map(rng, 12, 12, small_classes, void_patch=True)
            fwd = match_segments(a, b, small_classes)
            rev = match_segments(b, a, small_classes)
            # classes can differ where majority-void discards apply, so
            # compare only where both directions saw activity
            for cid in set(fwd.per_class) & set(rev.per_class):
                f, r = fwd.per_class[cid], rev.per_class[cid]
                assert {(g, p, i) for p, g, i in f.tp} == {
                    (p, g, i) for p, g, i in r.tp
                }

    def test_matches_are_unique_per_segment(self, rng, small_classes):
        for pred, gt in sample_pairs(rng, small_classes, 12):
            m = match_segments(pred, gt, small_classes)
            gt_keys = [g for cm in m.per_class.values() for _, g, _ in cm.tp]
            pred_keys = [p for cm in m.per_class.values() for p, _, _ in cm.tp]
            assert len(gt_keys) == len(set(gt_keys))
            assert len(pred_keys) == len(set(pred_keys))

    def test_agrees_with_pixel_set_oracle(self, rng, small_classes):
        for pred, gt in sample_pairs(rng, small_classes, 20):
            m = match_segments(pred, gt, small_classes)
            want = brute_force_match(pred, gt, small_classes.void_id)
            assert set(m.per_class) == set(want)
            for cid, cm in m.per_class.items():
                tps, fps, fns = want[cid]
                assert list(cm.tp) == tps  # identical floats, identical order
                assert list(cm.fp) == fps
                assert list(cm.fn) == fns

    def test_rejects_shape_mismatch(self, small_classes):
        a = pmap(np.zeros((4, 4), dtype=np.int32))
        b = pmap(np.zeros((4, 5), dtype=np.int32))
        with pytest.raises(ShapeError):
            match_segments(a, b, small_classes)

    def test_rejects_invalid_maps(self, small_classes):
        good = pmap(np.zeros((4, 4), dtype=np.int32))
        bad = pmap(np.full((4, 4), 42, dtype=np.int32))
        with pytest.raises(InvariantError):
            match_segments(bad, good, small_classes)


def single_match(cid, iou, fp=0, fn=0):
    return SegmentMatch({
        cid: ClassMatches(
            tp=(((cid, 1), (cid, 1), iou),),
            fp=tuple((cid, 10 + i) for i in range(fp)),
            fn=tuple((cid, 20 + i) for i in range(fn)),
        )
    })


class TestComputePq:
    def test_single_match_formula(self, small_classes):
        report = compute_pq(single_match(5, 0.6), small_classes)
        row = {r.class_id: r for r in report.per_class}[5]
        assert row.pq == pytest.approx(0.6, abs=1e-15)
        assert row.sq == pytest.approx(0.6, abs=1e-15)
        assert row.rq == 1.0

    def test_two_class_grid_average(self, small_classes):
        pred, gt = grid_fixture()
        report = compute_pq(match_segments(pred, gt, small_classes), small_classes)
        assert report.all.pq == pytest.approx(0.775, abs=1e-12)
        assert report.all.n_classes == 2
        assert report.stuff.pq == pytest.approx(0.8, abs=1e-12)
        assert report.things.pq == pytest.approx(0.75, abs=1e-12)

    def test_perfect_prediction_scores_one(self, rng, small_classes):
        gt = random_panoptic_map(rng, 16, 16, small_classes)
        report = compute_pq(match_segments(gt, gt, small_classes), small_classes)
        for r in report.per_class:
            if r.populated:
                assert (r.pq, r.sq, r.rq) == (1.0, 1.0, 1.0)
        assert report.all.pq == 1.0

    def test_pq_factorizes_into_sq_times_rq(self, rng, small_classes):
        for pred, gt in sample_pairs(rng, small_classes, 30):
            report = compute_pq(match_segments(pred, gt, small_classes), small_classes)
            for r in report.per_class:
                assert abs(r.pq - r.sq * r.rq) <= 1e-12

    def test_dataset_accumulation_beats_mean_of_images(self, small_classes):
        img_a = single_match(5, 0.6)
        img_b = SegmentMatch({5: ClassMatches(tp=(), fp=((5, 1),), fn=())})
        combined = compute_pq([img_a, img_b], small_classes)
        row = {r.class_id: r for r in combined.per_class}[5]
        # counts pool before division: 0.6 / (1 + 0.5) — not mean(0.6, 0)
        assert row.pq == pytest.approx(0.4, abs=1e-12)
        assert (row.tp, row.fp, row.fn) == (1, 1, 0)

    def test_idle_classes_leave_the_averages(self, small_classes):
        report = compute_pq(single_match(5, 0.9), small_classes)
        assert report.all.n_classes == 1
        assert report.stuff.n_classes == 0
        assert report.stuff.pq == 0.0
        assert report.things.n_classes == 1
        assert report.all.pq == pytest.approx(0.9, abs=1e-15)

    def test_rejects_unknown_class(self, small_classes):
        with pytest.raises(DataError, match="99"):
            compute_pq(single_match(99, 0.9), small_classes)

    def test_matches_brute_force_bit_for_bit(self, rng, small_classes):
        pairs = sample_pairs(rng, small_classes, 40)
        matches = [match_segments(p, g, small_classes) for p, g in pairs]
        report = compute_pq(matches, small_classes)
        per, all_s, stuff_s, things_s = brute_force_pq(
            pairs, small_classes.class_ids, set(small_classes.stuff_ids),
            small_classes.void_id,
        )
        for r in report.per_class:
            w = per[r.class_id]
            assert (r.iou_sum, r.tp, r.fp, r.fn) == (
                w["iou_sum"], w["tp"], w["fp"], w["fn"]
            )
            assert (r.pq, r.sq, r.rq) == (w["pq"], w["sq"], w["rq"])
        for got, want in (
            (report.all, all_s), (report.stuff, stuff_s), (report.things, things_s)
        ):
            assert (got.pq, got.sq, got.rq, got.n_classes) == want


class TestMiou:
    def test_identity_is_one(self, rng, small_classes):
        gt = random_panoptic_map(rng, 16, 16, small_classes)
        report = compute_miou(gt.class_map, gt.class_map, small_classes)
        assert report.miou == 1.0

    def test_disjoint_class_scores_zero(self, small_classes):
        g = np.full((4, 4), 1, dtype=np.int32)
        p = np.full((4, 4), 2, dtype=np.int32)
        report = compute_miou(p, g, small_classes)
        assert report.per_class[1] == 0.0
        assert report.per_class[2] is None  # prediction-only: no gt pixels
        assert report.miou == 0.0

    def test_grid_fixture_value(self, small_classes):
        pred, gt = grid_fixture()
        report = compute_miou(pred.class_map, gt.class_map, small_classes)
        assert report.per_class[1] == pytest.approx(0.8, abs=1e-15)
        assert report.per_class[5] == pytest.approx(0.75, abs=1e-15)

    def test_absent_classes_report_none(self, small_classes):
        g = np.full((4, 4), 1, dtype=np.int32)
        report = compute_miou(g, g, small_classes)
        assert report.per_class[1] == 1.0
        assert report.per_class[3] is None
        assert report.miou == 1.0

    def test_void_pixels_do_not_count(self, small_classes):
        g = np.full((4, 4), small_classes.void_id, dtype=np.int32)
        g[0] = 1
        p = np.full((4, 4), 1, dtype=np.int32)  # spills over void: no penalty
        report = compute_miou(p, g, small_classes)
        assert report.per_class[1] == 1.0

    def test_accumulates_across_images(self, small_classes):
        g1 = np.full((2, 2), 1, dtype=np.int32)
        p1 = np.full((2, 2), 1, dtype=np.int32)
        g2 = np.full((2, 2), 1, dtype=np.int32)
        p2 = np.full((2, 2), 2, dtype=np.int32)
        report = compute_miou([p1, p2], [g1, g2], small_classes)
        # class 1: inter 4, union 8 pooled over both images
        assert report.per_class[1] == pytest.approx(0.5, abs=1e-15)

    def test_matches_pixel_loop_oracle(self, rng, small_classes):
        preds, gts = [], []
        for pred, gt in sample_pairs(rng, small_classes, 8, size=10):
            preds.append(pred.class_map)
            gts.append(gt.class_map)
        report = compute_miou(preds, gts, small_classes)
        per, miou = naive_miou(
            preds, gts, small_classes.class_ids, small_classes.void_id
        )
        assert report.per_class == per
        assert report.miou == miou

    def test_rejects_mismatches(self, small_classes):
        with pytest.raises(ShapeError):
            compute_miou(
                np.zeros((4, 4), dtype=np.int32),
                np.zeros((4, 5), dtype=np.int32),
                small_classes,
            )
        with pytest.raises(DataError, match="2 .*1|1 .*2"):
            compute_miou(
                [np.zeros((4, 4), dtype=np.int32)] * 2,
                [np.zeros((4, 4), dtype=np.int32)],
                small_classes,
            )
