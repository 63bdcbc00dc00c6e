import math
import warnings

import numpy as np
import pytest

from panoptikit.errors import DataError, ShapeError
from panoptikit.losses import (
    HEAD_SAMPLE_CAP,
    RPN_SAMPLE_CAP,
    Box,
    BoxDelta,
    DegenerateInputWarning,
    MatchThresholds,
    SampleSet,
    classification_loss,
    decode_box,
    encode_box,
    instance_loss,
    mask_loss,
    match_label,
    objectness_loss,
    regression_loss,
    semantic_loss,
    smooth_l1,
    total_loss,
)


def probs_for(true_probs, n_classes=3):
    """Build (1, C, H, W) probs whose class-0 plane is ``true_probs``."""
    tp = np.asarray(true_probs, dtype=np.float64)
    h, w = tp.shape
    rest = (1.0 - tp) / (n_classes - 1)
    planes = [tp] + [rest] * (n_classes - 1)
    return np.stack(planes)[None, :, :, :]


def slow_semantic(probs, gt, void_id=255):
    """Reference loop: worst-quarter bootstrapped log loss, batch averaged."""
    n, c, h, w = probs.shape
    quota = math.ceil(0.25 * h * w)
    total = 0.0
    for i in range(n):
        vals = []
        for y in range(h):
            for x in range(w):
                if gt[i, y, x] != void_id:
                    vals.append(float(probs[i, gt[i, y, x], y, x]))
        vals.sort()
        picked = vals[: min(quota, len(vals))]
        total += (4.0 / (h * w)) * sum(
            -math.log(min(max(p, 1e-7), 1 - 1e-7)) for p in picked
        )
    return total / n


class TestSemanticLoss:
    def test_two_by_two_point_value(self):
        probs = probs_for([[0.9, 0.8], [0.7, 0.6]])
        gt = np.zeros((1, 2, 2), dtype=np.int64)
        loss = semantic_loss(probs, gt)
        assert loss == pytest.approx(0.510826, abs=1e-5)
        assert loss == pytest.approx(-math.log(0.6), abs=1e-9)

    def test_perfect_prediction_is_clamp_small(self):
        probs = np.zeros((1, 3, 2, 2))
        probs[0, 1] = 1.0
        gt = np.ones((1, 2, 2), dtype=np.int64)
        assert semantic_loss(probs, gt) < 1e-6

    def test_tiling_leaves_loss_unchanged(self):
        base = np.array([[0.9, 0.8], [0.7, 0.6]])
        small = semantic_loss(probs_for(base), np.zeros((1, 2, 2), dtype=np.int64))
        tiled = np.tile(base, (2, 2))
        big = semantic_loss(probs_for(tiled), np.zeros((1, 4, 4), dtype=np.int64))
        assert big == pytest.approx(small, rel=1e-12)

    def test_void_pixels_never_selected(self):
        probs = probs_for([[0.9, 0.8], [0.7, 0.001]])
        gt = np.zeros((1, 2, 2), dtype=np.int64)
        gt[0, 1, 1] = 255
        assert semantic_loss(probs, gt) == pytest.approx(-math.log(0.7), abs=1e-9)

    def test_batch_mean_and_all_void_warning(self):
        probs = np.concatenate(
            [probs_for([[0.9, 0.8], [0.7, 0.6]])] * 2, axis=0
        )
        gt = np.zeros((2, 2, 2), dtype=np.int64)
        gt[0] = 255
        with pytest.warns(DegenerateInputWarning):
            loss = semantic_loss(probs, gt)
        assert loss == pytest.approx(-math.log(0.6) / 2, abs=1e-9)

    def test_matches_reference_loop(self, rng):
        raw = rng.random((3, 4, 6, 5))
        probs = raw / raw.sum(axis=1, keepdims=True)
        gt = rng.integers(0, 4, size=(3, 6, 5))
        gt[rng.random((3, 6, 5)) < 0.2] = 255
        assert semantic_loss(probs, gt) == pytest.approx(
            slow_semantic(probs, gt), rel=1e-12
        )

    def test_selection_takes_the_hardest_quarter(self, rng):
        # moving weight from a selected pixel to any unselected one can only
        # lower the per-pixel term it replaces, so the reported loss is maximal
        raw = rng.random((1, 3, 4, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        gt = rng.integers(0, 3, size=(1, 4, 4))
        true = probs[0, gt[0], np.arange(4)[:, None], np.arange(4)[None, :]]
        quota = math.ceil(0.25 * 16)
        worst = np.sort(true.ravel())[:quota]
        expected = (4.0 / 16) * float(np.sum(-np.log(np.clip(worst, 1e-7, 1 - 1e-7))))
        assert semantic_loss(probs, gt) == pytest.approx(expected, rel=1e-12)

    def test_rejects_out_of_range_labels(self):
        probs = probs_for([[0.5, 0.5], [0.5, 0.5]])
        gt = np.full((1, 2, 2), 7, dtype=np.int64)
        with pytest.raises(DataError, match="7"):
            semantic_loss(probs, gt)

    def test_rejects_shape_mismatch(self):
        probs = probs_for([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(ShapeError):
            semantic_loss(probs, np.zeros((1, 3, 3), dtype=np.int64))
        with pytest.raises(ShapeError):
            semantic_loss(np.zeros((3, 2, 2)), np.zeros((1, 2, 2), dtype=np.int64))


class TestMatching:
    def test_default_thresholds(self):
        assert match_label(0.71) == 1
        assert match_label(0.29) == 0
        assert match_label(0.5) is None
        assert match_label(0.7) is None  # bounds are exclusive
        assert match_label(0.3) is None

    def test_custom_thresholds(self):
        t = MatchThresholds(high=0.5, low=0.1)
        assert match_label(0.6, t) == 1
        assert match_label(0.05, t) == 0

    def test_rejects_inverted_thresholds(self):
        with pytest.raises(DataError):
            MatchThresholds(high=0.2, low=0.4)

    def test_sample_set_capacity(self):
        assert (RPN_SAMPLE_CAP, HEAD_SAMPLE_CAP) == (256, 512)
        s = SampleSet(((1, 0.9), (0, 0.2)), capacity=2)
        assert len(s) == 2 and list(s) == [(1, 0.9), (0, 0.2)]
        with pytest.raises(DataError, match="capacity"):
            SampleSet(((1, 0.9),) * 3, capacity=2)
        with pytest.raises(DataError):
            SampleSet((), capacity=0)

    def test_sample_set_default_capacity(self):
        assert SampleSet(()).capacity == HEAD_SAMPLE_CAP


class TestObjectness:
    def test_point_values(self):
        assert objectness_loss([(1.0, 0.5)]) == pytest.approx(0.693147, abs=1e-5)
        assert objectness_loss([(0.0, 0.5)]) == pytest.approx(
            objectness_loss([(1.0, 0.5)]), abs=1e-12
        )
        assert objectness_loss([(1.0, 1.0 - 1e-7)]) < 1e-6

    def test_mean_over_samples(self):
        mixed = objectness_loss([(1.0, 0.5), (1.0, 1.0)])
        assert mixed == pytest.approx(math.log(2) / 2, abs=1e-6)

    def test_empty_warns_and_returns_zero(self):
        with pytest.warns(DegenerateInputWarning):
            assert objectness_loss([]) == 0.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(DataError, match="targets"):
            objectness_loss([(0.5, 0.5)])
        with pytest.raises(DataError, match="probabilities"):
            objectness_loss([(1.0, 1.5)])


class TestBoxCoding:
    def test_identity(self):
        a = Box(3.0, 4.0, 5.0, 6.0)
        d = encode_box(a, a)
        assert (d.tx, d.ty, d.tw, d.th) == (0.0, 0.0, 0.0, 0.0)

    def test_worked_example(self):
        anchor = Box(10.0, 10.0, 20.0, 20.0)
        box = Box(15.0, 10.0, 40.0, 20.0)
        d = encode_box(box, anchor)
        assert d.tx == pytest.approx(0.25, abs=1e-9)
        assert d.ty == 0.0
        assert d.tw == pytest.approx(0.693147, abs=1e-6)
        assert d.th == 0.0

    def test_round_trip(self, rng):
        for _ in range(200):
            cx, cy = rng.uniform(-100, 100, 2)
            w, h = rng.uniform(0.1, 80, 2)
            acx, acy = rng.uniform(-100, 100, 2)
            aw, ah = rng.uniform(0.1, 80, 2)
            box, anchor = Box(cx, cy, w, h), Box(acx, acy, aw, ah)
            back = decode_box(encode_box(box, anchor), anchor)
            for got, want in zip(
                (back.cx, back.cy, back.w, back.h), (cx, cy, w, h)
            ):
                assert got == pytest.approx(want, abs=1e-6, rel=1e-9)

    def test_rejects_flat_boxes(self):
        with pytest.raises(DataError):
            Box(0.0, 0.0, 0.0, 5.0)
        with pytest.raises(DataError):
            Box(0.0, 0.0, 5.0, -1.0)


class TestSmoothL1:
    @pytest.mark.parametrize("d,expected", [
        (0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (1.0, 0.5),
        (2.0, 1.5), (-2.0, 1.5), (10.0, 9.5),
    ])
    def test_values(self, d, expected):
        assert smooth_l1(d) == pytest.approx(expected, abs=1e-12)

    def test_smooth_at_the_knee(self):
        h = 1e-6
        left = (smooth_l1(1.0) - smooth_l1(1.0 - h)) / h
        right = (smooth_l1(1.0 + h) - smooth_l1(1.0)) / h
        assert abs(left - right) < 1e-5
        assert smooth_l1(1.0 - 1e-12) == pytest.approx(smooth_l1(1.0), abs=1e-9)


class TestRegression:
    def test_identical_deltas(self):
        d = BoxDelta(0.1, -0.2, 0.3, 0.0)
        assert regression_loss([(d, d)], normalizer=1.0) == 0.0

    def test_single_component_cases(self):
        zero = BoxDelta(0, 0, 0, 0)
        assert regression_loss(
            [(zero, BoxDelta(0.5, 0, 0, 0))], normalizer=1.0
        ) == pytest.approx(0.125, abs=1e-12)
        assert regression_loss(
            [(zero, BoxDelta(0, 0, 2.0, 0))], normalizer=1.0
        ) == pytest.approx(1.5, abs=1e-12)

    def test_sums_then_normalizes(self):
        zero = BoxDelta(0, 0, 0, 0)
        pairs = [(zero, BoxDelta(0.5, 0.5, 0, 0)), (zero, BoxDelta(0, 0, 2.0, 0))]
        assert regression_loss(pairs, normalizer=256) == pytest.approx(
            (0.125 + 0.125 + 1.5) / 256, abs=1e-12
        )

    def test_rejects_bad_normalizer(self):
        with pytest.raises(DataError):
            regression_loss([], normalizer=0)


class TestClassification:
    def test_point_values(self):
        assert classification_loss(
            [((0, 1, 0), (0.5, 0.25, 0.25))]
        ) == pytest.approx(1.386294, abs=1e-5)
        assert classification_loss([((1, 0), (1.0, 0.0))]) < 1e-6

    def test_uniform_gives_log_c(self):
        c = 5
        loss = classification_loss([((1,) + (0,) * (c - 1), (1.0 / c,) * c)])
        assert loss == pytest.approx(math.log(c), abs=1e-9)

    def test_mean_over_samples(self):
        samples = [((1, 0), (0.5, 0.5)), ((0, 1), (0.5, 0.5))]
        assert classification_loss(samples) == pytest.approx(math.log(2), abs=1e-9)

    def test_empty_warns(self):
        with pytest.warns(DegenerateInputWarning):
            assert classification_loss([]) == 0.0

    def test_rejects_bad_targets_and_distributions(self):
        with pytest.raises(DataError, match="one-hot"):
            classification_loss([((0.5, 0.5), (0.5, 0.5))])
        with pytest.raises(DataError, match="sums"):
            classification_loss([((1, 0), (0.9, 0.9))])
        with pytest.raises(ShapeError):
            classification_loss([((1, 0), (0.5, 0.25, 0.25))])


class TestMaskLoss:
    def test_uniform_half_is_ln2(self, rng):
        target = rng.integers(0, 2, size=(28, 28)).astype(np.float64)
        probs = np.full((28, 28), 0.5)
        assert mask_loss([(target, probs)]) == pytest.approx(math.log(2), abs=1e-9)

    def test_perfect_match_is_clamp_small(self, rng):
        target = rng.integers(0, 2, size=(28, 28)).astype(np.float64)
        assert mask_loss([(target, target.copy())]) < 1e-5

    def test_void_pixels_are_ignored(self, rng):
        target = rng.integers(0, 2, size=(8, 8)).astype(np.float64)
        target[:4] = -1.0
        a = rng.random((8, 8))
        b = a.copy()
        b[:4] = rng.random((4, 8))  # flip void-region predictions arbitrarily
        assert mask_loss([(target, a)]) == mask_loss([(target, b)])

    def test_capacity_division(self):
        target = np.ones((4, 4))
        probs = np.full((4, 4), 0.5)
        one = mask_loss([(target, probs)])
        assert mask_loss([(target, probs)], sample_capacity=4) == pytest.approx(
            one / 4, abs=1e-12
        )
        two = mask_loss([(target, probs), (target, probs)])
        assert two == pytest.approx(one, abs=1e-12)  # mean of equal instances

    def test_all_void_instance_warns_and_contributes_zero(self):
        void = np.full((4, 4), -1.0)
        live = np.ones((4, 4))
        probs = np.full((4, 4), 0.5)
        with pytest.warns(DegenerateInputWarning):
            loss = mask_loss([(void, probs), (live, probs)])
        assert loss == pytest.approx(math.log(2) / 2, abs=1e-9)

    def test_empty_warns(self):
        with pytest.warns(DegenerateInputWarning):
            assert mask_loss([]) == 0.0

    def test_rejects_non_binary_labels_and_mismatch(self):
        probs = np.full((4, 4), 0.5)
        with pytest.raises(DataError, match="0 or 1"):
            mask_loss([(np.full((4, 4), 0.5), probs)])
        with pytest.raises(ShapeError):
            mask_loss([(np.ones((4, 4)), np.full((5, 4), 0.5))])


class TestTotals:
    def test_equal_weight_sum(self):
        assert total_loss(1.0, 0.1, 0.2, 0.3, 0.4, 0.5) == pytest.approx(2.5)
        assert instance_loss(0.1, 0.2, 0.3, 0.4, 0.5) == pytest.approx(1.5)
        assert total_loss(0, 0, 0, 0, 0, 0) == 0.0

    def test_order_invariance_of_components(self):
        vals = (0.7, 0.1, 0.4, 0.2, 0.6)
        seen = {instance_loss(*perm) for perm in (
            vals, vals[::-1], (0.4, 0.7, 0.6, 0.1, 0.2)
        )}
        assert all(v == pytest.approx(2.0) for v in seen)

    def test_rejects_negative_components(self):
        with pytest.raises(DataError):
            instance_loss(0.1, -0.2, 0.3, 0.4, 0.5)
        with pytest.raises(DataError):
            total_loss(-1.0, 0, 0, 0, 0, 0)

    def test_losses_are_nonnegative_on_random_inputs(self, rng):
        for _ in range(25):
            pairs = [(float(rng.integers(0, 2)), float(rng.random()))
                     for _ in range(8)]
            assert objectness_loss(pairs) >= 0.0
            raw = rng.random((1, 3, 4, 4))
            probs = raw / raw.sum(axis=1, keepdims=True)
            gt = rng.integers(0, 3, size=(1, 4, 4))
            assert semantic_loss(probs, gt) >= 0.0
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                target = rng.integers(0, 2, size=(6, 6)).astype(float)
                assert mask_loss([(target, rng.random((6, 6)))]) >= 0.0
