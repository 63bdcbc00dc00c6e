"""Training losses: bootstrapped semantic loss plus the instance-head terms.

All functions are pure, compute in float64, clamp probabilities to
``[1e-7, 1 - 1e-7]`` before any log, and return non-negative floats.
Degenerate inputs (all-void targets, empty sample sets) yield 0.0 and emit a
:class:`DegenerateInputWarning` instead of raising.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor

__all__ = [
    "PROB_EPS",
    "RPN_SAMPLE_CAP",
    "HEAD_SAMPLE_CAP",
    "DegenerateInputWarning",
    "MatchThresholds",
    "SampleSet",
    "match_label",
    "Box",
    "BoxDelta",
    "encode_box",
    "decode_box",
    "smooth_l1",
    "semantic_loss",
    "objectness_loss",
    "regression_loss",
    "classification_loss",
    "mask_loss",
    "instance_loss",
    "total_loss",
]

PROB_EPS = 1e-7
RPN_SAMPLE_CAP = 256  # |N_s|: anchors scored per image in the proposal stage
HEAD_SAMPLE_CAP = 512  # |K_s|: proposals consumed by the per-instance heads


class DegenerateInputWarning(UserWarning):
    """A loss term had nothing to average over and was defined as 0."""


@dataclass(frozen=True)
class MatchThresholds:
    """IoU thresholds for labeling matches.

    ``high``/``low`` split proposal-stage anchors into positives/negatives
    (in-between anchors are unlabeled); ``head_positive`` is the floor for a
    proposal to count as positive for the downstream heads.
    """

    high: float = 0.7
    low: float = 0.3
    head_positive: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise DataError(
                f"need 0 <= low <= high <= 1, got low={self.low} high={self.high}"
            )


def match_label(iou: float, thresholds: MatchThresholds = MatchThresholds()):
    """1 for a positive match, 0 for a negative, None for unlabeled."""
    if iou > thresholds.high:
        return 1
    if iou < thresholds.low:
        return 0
    return None


@dataclass(frozen=True)
class SampleSet:
    """A capacity-checked tuple of (target, prediction) pairs."""

    pairs: tuple
    capacity: int = HEAD_SAMPLE_CAP

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.capacity < 1:
            raise DataError(f"capacity must be >= 1, got {self.capacity}")
        if len(self.pairs) > self.capacity:
            raise DataError(
                f"sample set holds {len(self.pairs)} pairs, over the "
                f"capacity {self.capacity}"
            )

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def semantic_loss(
    pred_probs: Tensor | np.ndarray,
    gt: np.ndarray,
    void_id: int = 255,
) -> float:
    """Bootstrapped per-pixel log loss, averaged over the batch.

    ``pred_probs`` is (n, C, H, W) post-softmax; ``gt`` is (n, H, W) holding
    channel indices 0..C-1 or ``void_id``. Per image, only the hardest
    quarter of the non-void pixels — the ceil(0.25 * H * W) lowest true-class
    probabilities, ties broken by pixel index — carry weight 4 / (H * W);
    everything else contributes nothing. An all-void image contributes 0 and
    warns.
    """
    probs = pred_probs.data if isinstance(pred_probs, Tensor) else np.asarray(pred_probs)
    gt = np.asarray(gt)
    if probs.ndim != 4:
        raise ShapeError("pred_probs must be (n, C, H, W)", actual=probs.shape)
    if gt.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError(
            "gt must be (n, H, W) matching pred_probs",
            expected=(probs.shape[0],) + probs.shape[2:],
            actual=gt.shape,
        )
    n, c, h, w = probs.shape
    valid_values = (gt == void_id) | ((gt >= 0) & (gt < c))
    if not valid_values.all():
        bad = np.unique(gt[~valid_values])
        raise DataError(f"gt holds labels outside 0..{c - 1} + void: {bad.tolist()}")

    quota = math.ceil(0.25 * h * w)
    weight = 4.0 / (h * w)
    total = 0.0
    for i in range(n):
        g = gt[i]
        rows, cols = np.nonzero(g != void_id)
        if rows.size == 0:
            warnings.warn(
                f"image {i}: ground truth is entirely void; semantic loss 0",
                DegenerateInputWarning,
                stacklevel=2,
            )
            continue
        p_true = probs[i, g[rows, cols], rows, cols].astype(np.float64)
        order = np.argsort(p_true, kind="stable")  # ascending prob, ties by pixel index
        chosen = p_true[order[: min(quota, p_true.size)]]
        total += weight * float(np.sum(-np.log(_clamp(chosen))))
    return total / n


def objectness_loss(samples: Iterable[tuple[float, float]]) -> float:
    """Mean binary cross-entropy over (target, predicted-probability) pairs."""
    pairs = list(samples)
    if not pairs:
        warnings.warn(
            "objectness sample set is empty; loss 0", DegenerateInputWarning,
            stacklevel=2,
        )
        return 0.0
    targets = np.asarray([t for t, _ in pairs], dtype=np.float64)
    raw = np.asarray([p for _, p in pairs], dtype=np.float64)
    if not np.isin(targets, (0.0, 1.0)).all():
        raise DataError("objectness targets must be 0 or 1")
    if raw.min() < 0.0 or raw.max() > 1.0:
        raise DataError("objectness predictions must be probabilities in [0, 1]")
    preds = _clamp(raw)
    bce = -(targets * np.log(preds) + (1.0 - targets) * np.log(1.0 - preds))
    return float(bce.mean())


@dataclass(frozen=True)
class Box:
    """An axis-aligned box as (center_x, center_y, width, height)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"box sides must be positive, got w={self.w} h={self.h}")


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


def encode_box(box: Box, anchor: Box) -> BoxDelta:
    """Anchor-relative offsets: translations over anchor size, log size ratios."""
    return BoxDelta(
        (box.cx - anchor.cx) / anchor.w,
        (box.cy - anchor.cy) / anchor.h,
        math.log(box.w / anchor.w),
        math.log(box.h / anchor.h),
    )


def decode_box(delta: BoxDelta, anchor: Box) -> Box:
    """Inverse of :func:`encode_box`."""
    return Box(
        anchor.cx + delta.tx * anchor.w,
        anchor.cy + delta.ty * anchor.h,
        anchor.w * math.exp(delta.tw),
        anchor.h * math.exp(delta.th),
    )


def smooth_l1(d: float) -> float:
    """0.5 d^2 inside |d| < 1, |d| - 0.5 outside (continuous at the knee)."""
    a = abs(d)
    return 0.5 * d * d if a < 1.0 else a - 0.5


def regression_loss(
    pairs: Iterable[tuple[BoxDelta, BoxDelta]],
    normalizer: float,
) -> float:
    """Smooth-L1 over all delta components, divided by ``normalizer``."""
    if normalizer <= 0:
        raise DataError(f"normalizer must be positive, got {normalizer}")
    total = 0.0
    for target, pred in pairs:
        diff = pred.as_array() - target.as_array()
        total += float(sum(smooth_l1(d) for d in diff))
    return total / normalizer


def classification_loss(
    samples: Iterable[tuple[Sequence[float], Sequence[float]]],
) -> float:
    """Mean cross-entropy over (one-hot target, predicted distribution) pairs."""
    total = 0.0
    count = 0
    for target, dist in samples:
        t = np.asarray(target, dtype=np.float64)
        y = np.asarray(dist, dtype=np.float64)
        if t.shape != y.shape:
            raise ShapeError(
                "target and distribution must align", expected=t.shape, actual=y.shape
            )
        if not (np.isin(t, (0.0, 1.0)).all() and t.sum() == 1.0):
            raise DataError("classification target must be one-hot")
        if abs(float(y.sum()) - 1.0) > 1e-6:
            raise DataError(
                f"predicted distribution sums to {float(y.sum())}, expected 1"
            )
        total += float(-np.sum(t * np.log(_clamp(y))))
        count += 1
    if count == 0:
        warnings.warn(
            "classification sample set is empty; loss 0", DegenerateInputWarning,
            stacklevel=2,
        )
        return 0.0
    return total / count


def mask_loss(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]],
    sample_capacity: int | None = None,
) -> float:
    """Per-instance mean mask BCE over non-void pixels, summed, over capacity.

    Each pair is ``(target, probs)`` on the same grid: target values are 1
    (foreground), 0 (background), or negative (void, excluded). The sum of
    per-instance means is divided by ``sample_capacity`` (defaults to the
    number of pairs). Instances with no labeled pixels contribute 0 and warn.
    """
    pairs = list(pairs)
    k = sample_capacity if sample_capacity is not None else len(pairs)
    if k <= 0 or not pairs:
        warnings.warn(
            "mask sample set is empty; loss 0", DegenerateInputWarning, stacklevel=2
        )
        return 0.0
    total = 0.0
    for idx, (target, probs) in enumerate(pairs):
        t = np.asarray(target)
        p = np.asarray(probs, dtype=np.float64)
        if t.shape != p.shape:
            raise ShapeError(
                f"mask pair {idx}: target and probs must align",
                expected=t.shape,
                actual=p.shape,
            )
        labeled = t >= 0
        if not labeled.any():
            warnings.warn(
                f"mask pair {idx}: target entirely void; contributes 0",
                DegenerateInputWarning,
                stacklevel=2,
            )
            continue
        tv = t[labeled].astype(np.float64)
        if not np.isin(tv, (0.0, 1.0)).all():
            raise DataError(f"mask pair {idx}: labeled targets must be 0 or 1")
        pv = _clamp(p[labeled])
        bce = -(tv * np.log(pv) + (1.0 - tv) * np.log(1.0 - pv))
        total += float(bce.mean())
    return total / k


def instance_loss(
    objectness: float,
    proposal: float,
    classification: float,
    bbox: float,
    mask: float,
) -> float:
    """Sum of the five instance-head terms."""
    parts = (objectness, proposal, classification, bbox, mask)
    if any(v < 0 for v in parts):
        raise DataError(f"loss components must be non-negative, got {parts}")
    return float(sum(parts))


def total_loss(
    semantic: float,
    objectness: float,
    proposal: float,
    classification: float,
    bbox: float,
    mask: float,
) -> float:
    """Semantic term plus the instance-head sum."""
    if semantic < 0:
        raise DataError(f"semantic loss must be non-negative, got {semantic}")
    return semantic + instance_loss(objectness, proposal, classification, bbox, mask)
