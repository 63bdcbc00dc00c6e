"""Panoptic quality and mIoU over (class, instance) maps.

Matching follows the published panoptic benchmark protocol: segments are the
maximal same-(class, id) pixel sets, a prediction matches a ground-truth
segment of the same class when their IoU exceeds 0.5 (which makes matches
unique), the IoU union excludes the prediction's overlap with ground-truth
void, unmatched predictions majority-covered by void are discarded rather
than counted as false positives, and classes with no activity are excluded
from the averages. Accumulation is dataset-level: counts and IoU sums add up
across images before any division.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .panio import ClassConfig, PanopticMap

__all__ = [
    "SegKey",
    "ClassMatches",
    "SegmentMatch",
    "match_segments",
    "PqClassResult",
    "PqStats",
    "PqReport",
    "compute_pq",
    "MiouReport",
    "compute_miou",
]

SegKey = tuple[int, int]  # (class_id, instance_id)

_ENC = 1 << 24  # segment key = class_id * _ENC + instance_id


@dataclass(frozen=True)
class ClassMatches:
    """Match lists for one class: TP triples are sorted by ground-truth key."""

    tp: tuple[tuple[SegKey, SegKey, float], ...]  # (pred_key, gt_key, iou)
    fp: tuple[SegKey, ...]
    fn: tuple[SegKey, ...]


@dataclass(frozen=True)
class SegmentMatch:
    per_class: dict[int, ClassMatches]


def _encode(pmap: PanopticMap) -> np.ndarray:
    cls = pmap.class_map.astype(np.int64).ravel()
    inst = pmap.instance_map.astype(np.int64).ravel()
    if inst.max(initial=0) >= _ENC:
        raise DataError(f"instance ids must stay below {_ENC}")
    return cls * _ENC + inst


def _key(code: int) -> SegKey:
    return int(code // _ENC), int(code % _ENC)


def match_segments(
    pred: PanopticMap, gt: PanopticMap, classes: ClassConfig
) -> SegmentMatch:
    """Match predicted segments to ground truth for one image."""
    if pred.shape != gt.shape:
        raise ShapeError(
            "pred and gt maps must share shape", expected=gt.shape, actual=pred.shape
        )
    pred.validate(classes)
    gt.validate(classes)
    void = classes.void_id

    p_code = _encode(pred)
    g_code = _encode(gt)
    p_uniq, p_idx = np.unique(p_code, return_inverse=True)
    g_uniq, g_idx = np.unique(g_code, return_inverse=True)
    p_area = dict(zip(p_uniq.tolist(), np.bincount(p_idx).tolist()))
    g_area = dict(zip(g_uniq.tolist(), np.bincount(g_idx).tolist()))

    pair_idx = g_idx.astype(np.int64) * len(p_uniq) + p_idx
    pair_uniq, pair_count = np.unique(pair_idx, return_counts=True)
    inter: dict[tuple[int, int], int] = {}
    for pair, count in zip(pair_uniq.tolist(), pair_count.tolist()):
        gk = int(g_uniq[pair // len(p_uniq)])
        pk = int(p_uniq[pair % len(p_uniq)])
        inter[(gk, pk)] = int(count)

    gt_void_code = void * _ENC
    void_overlap = {
        pk: n for (gk, pk), n in inter.items() if gk == gt_void_code
    }

    matched_p: set[int] = set()
    matched_g: set[int] = set()
    tp: dict[int, list] = {}
    for gk, pk in sorted(inter):
        g_cls, p_cls = gk // _ENC, pk // _ENC
        if g_cls != p_cls or g_cls == void:
            continue
        n = inter[(gk, pk)]
        union = g_area[gk] + p_area[pk] - n - void_overlap.get(pk, 0)
        iou = n / union
        if iou > 0.5:
            tp.setdefault(g_cls, []).append((_key(pk), _key(gk), iou))
            matched_p.add(pk)
            matched_g.add(gk)

    fp: dict[int, list] = {}
    for pk in sorted(p_area):
        cls = pk // _ENC
        if cls == void or pk in matched_p:
            continue
        if void_overlap.get(pk, 0) / p_area[pk] > 0.5:
            continue  # majority-void predictions are ignored, not penalized
        fp.setdefault(cls, []).append(_key(pk))

    fn: dict[int, list] = {}
    for gk in sorted(g_area):
        cls = gk // _ENC
        if cls == void or gk in matched_g:
            continue
        fn.setdefault(cls, []).append(_key(gk))

    per_class = {
        cid: ClassMatches(
            tuple(tp.get(cid, ())), tuple(fp.get(cid, ())), tuple(fn.get(cid, ()))
        )
        for cid in sorted(set(tp) | set(fp) | set(fn))
    }
    return SegmentMatch(per_class)


@dataclass(frozen=True)
class PqClassResult:
    class_id: int
    iou_sum: float
    tp: int
    fp: int
    fn: int
    pq: float
    sq: float
    rq: float

    @property
    def populated(self) -> bool:
        return (self.tp + self.fp + self.fn) > 0


@dataclass(frozen=True)
class PqStats:
    """One aggregate row: unweighted means over populated classes."""

    pq: float
    sq: float
    rq: float
    n_classes: int


@dataclass(frozen=True)
class PqReport:
    per_class: tuple[PqClassResult, ...]  # registry order
    all: PqStats
    stuff: PqStats
    things: PqStats


def _aggregate(results: Sequence[PqClassResult]) -> PqStats:
    pop = [r for r in results if r.populated]
    if not pop:
        return PqStats(0.0, 0.0, 0.0, 0)
    n = len(pop)
    return PqStats(
        sum(r.pq for r in pop) / n,
        sum(r.sq for r in pop) / n,
        sum(r.rq for r in pop) / n,
        n,
    )


def compute_pq(
    matches: SegmentMatch | Iterable[SegmentMatch],
    classes: ClassConfig,
) -> PqReport:
    """Panoptic quality from one or many per-image match results.

    Per class: PQ = sum(IoU) / (TP + FP/2 + FN/2), SQ = sum(IoU) / TP,
    RQ = TP / (TP + FP/2 + FN/2), all zero when the denominator vanishes.
    Counts and IoU sums accumulate across images before division.
    """
    if isinstance(matches, SegmentMatch):
        matches = [matches]
    iou_sum: dict[int, float] = {c: 0.0 for c in classes.class_ids}
    tp: dict[int, int] = {c: 0 for c in classes.class_ids}
    fp: dict[int, int] = {c: 0 for c in classes.class_ids}
    fn: dict[int, int] = {c: 0 for c in classes.class_ids}
    for m in matches:
        for cid, cm in m.per_class.items():
            if cid not in iou_sum:
                raise DataError(f"match results hold unknown class id {cid}")
            for _, _, iou in cm.tp:  # ascending gt key: the canonical sum order
                iou_sum[cid] += iou
            tp[cid] += len(cm.tp)
            fp[cid] += len(cm.fp)
            fn[cid] += len(cm.fn)

    results = []
    for cid in classes.class_ids:
        denom = tp[cid] + 0.5 * fp[cid] + 0.5 * fn[cid]
        pq = iou_sum[cid] / denom if denom else 0.0
        sq = iou_sum[cid] / tp[cid] if tp[cid] else 0.0
        rq = tp[cid] / denom if denom else 0.0
        results.append(
            PqClassResult(cid, iou_sum[cid], tp[cid], fp[cid], fn[cid], pq, sq, rq)
        )
    stuff_ids = set(classes.stuff_ids)
    return PqReport(
        per_class=tuple(results),
        all=_aggregate(results),
        stuff=_aggregate([r for r in results if r.class_id in stuff_ids]),
        things=_aggregate([r for r in results if r.class_id not in stuff_ids]),
    )


@dataclass(frozen=True)
class MiouReport:
    per_class: dict[int, float | None]  # None: class absent from ground truth
    miou: float


def compute_miou(
    preds: np.ndarray | Sequence[np.ndarray],
    gts: np.ndarray | Sequence[np.ndarray],
    classes: ClassConfig,
) -> MiouReport:
    """Dataset-level mean IoU over class maps, ignoring ground-truth void.

    Pixels whose ground truth is void are excluded from both intersection and
    union counts. The mean runs over classes with at least one ground-truth
    pixel; classes never seen in ground truth report None.
    """
    if isinstance(preds, np.ndarray):
        preds = [preds]
    if isinstance(gts, np.ndarray):
        gts = [gts]
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise DataError(
            f"got {len(preds)} predictions but {len(gts)} ground truths"
        )
    inter = {c: 0 for c in classes.class_ids}
    union = {c: 0 for c in classes.class_ids}
    gt_px = {c: 0 for c in classes.class_ids}
    for p, g in zip(preds, gts):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape or p.ndim != 2:
            raise ShapeError(
                "class maps must be equal-shaped 2-D arrays",
                expected=g.shape,
                actual=p.shape,
            )
        valid = g != classes.void_id
        for c in classes.class_ids:
            pm = (p == c) & valid
            gm = g == c
            inter[c] += int((pm & gm).sum())
            union[c] += int((pm | gm).sum())
            gt_px[c] += int(gm.sum())
    per_class: dict[int, float | None] = {}
    scores = []
    for c in classes.class_ids:
        if gt_px[c] == 0:
            per_class[c] = None
            continue
        per_class[c] = inter[c] / union[c]
        scores.append(per_class[c])
    miou = sum(scores) / len(scores) if scores else 0.0
    return MiouReport(per_class, miou)
