"""Independent reference implementations used to pin expected values.

Everything here is written the slow, obvious way — scalar loops and pixel
sets — so the vectorized library code has something unrelated to agree with.
Do not import panoptikit numerics into this file; plain numpy indexing and
Python arithmetic only.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# convolution


def naive_conv2d(x, w, stride=(1, 1), dilation=(1, 1), padding="same-zero",
                 groups=1, bias=None):
    """Nested-loop convolution over NCHW input and OIHW weights."""
    n, c_in, h, w_in = x.shape
    c_out, cpg, kh, kw = w.shape
    assert c_in == cpg * groups and c_out % groups == 0
    sh, sw = stride
    dh, dw = dilation
    ekh = (kh - 1) * dh + 1
    ekw = (kw - 1) * dw + 1
    if padding == "same-zero":
        ph0 = (ekh - 1) // 2
        ph1 = (ekh - 1) - ph0
        pw0 = (ekw - 1) // 2
        pw1 = (ekw - 1) - pw0
    else:
        ph0 = ph1 = padding[0]
        pw0 = pw1 = padding[1]
    out_h = (h + ph0 + ph1 - ekh) // sh + 1
    out_w = (w_in + pw0 + pw1 - ekw) // sw + 1
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    out = np.zeros((n, c_out, out_h, out_w), dtype=np.float64)
    per_group = c_out // groups
    for b in range(n):
        for oc in range(c_out):
            g = oc // per_group
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = 0.0
                    for ic in range(cpg):
                        src_c = g * cpg + ic
                        for i in range(kh):
                            yy = oh * sh - ph0 + i * dh
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(kw):
                                xx = ow * sw - pw0 + j * dw
                                if xx < 0 or xx >= w_in:
                                    continue
                                acc += x64[b, src_c, yy, xx] * w64[oc, ic, i, j]
                    if bias is not None:
                        acc += float(bias[oc])
                    out[b, oc, oh, ow] = acc
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# resize


def naive_bilinear(x, out_h, out_w):
    """Scalar-loop bilinear resize with half-pixel centers and edge clamp."""
    n, c, h, w = x.shape
    x64 = x.astype(np.float64)
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)
    for oy in range(out_h):
        sy = (oy + 0.5) * h / out_h - 0.5
        y0 = math.floor(sy)
        fy = sy - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for ox in range(out_w):
            sx = (ox + 0.5) * w / out_w - 0.5
            x0 = math.floor(sx)
            fx = sx - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            for b in range(n):
                for ch in range(c):
                    v00 = x64[b, ch, y0c, x0c]
                    v01 = x64[b, ch, y0c, x1c]
                    v10 = x64[b, ch, y1c, x0c]
                    v11 = x64[b, ch, y1c, x1c]
                    top = v00 + fx * (v01 - v00)
                    bot = v10 + fx * (v11 - v10)
                    out[b, ch, oy, ox] = top + fy * (bot - top)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# fusion scalars


def sigmoid_scalar(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def fuse_scalar(a: float, b: float) -> float:
    return (sigmoid_scalar(a) + sigmoid_scalar(b)) * (a + b)


# ---------------------------------------------------------------------------
# panoptic matching, the set-of-pixels way


def pixel_segments(class_map, instance_map, void_id):
    """(class_id, instance_id) -> set of (y, x), void pixels skipped."""
    segs: dict[tuple[int, int], set] = {}
    h, w = class_map.shape
    for y in range(h):
        for x in range(w):
            c = int(class_map[y, x])
            if c == void_id:
                continue
            segs.setdefault((c, int(instance_map[y, x])), set()).add((y, x))
    return segs


def brute_force_match(pred_map, gt_map, void_id):
    """Per-class (tp, fp, fn) from pixel sets.

    tp entries are (pred_key, gt_key, iou) in ascending gt-key order; fp and
    fn are sorted key lists. A prediction's IoU union drops its overlap with
    ground-truth void, and unmatched predictions that are majority void are
    dropped silently.
    """
    pred_segs = pixel_segments(pred_map.class_map, pred_map.instance_map, void_id)
    gt_segs = pixel_segments(gt_map.class_map, gt_map.instance_map, void_id)
    h, w = gt_map.class_map.shape
    gt_void = {
        (y, x)
        for y in range(h)
        for x in range(w)
        if int(gt_map.class_map[y, x]) == void_id
    }
    void_overlap = {pk: len(pix & gt_void) for pk, pix in pred_segs.items()}

    tp: dict[int, list] = {}
    matched_p: set = set()
    matched_g: set = set()
    for gt_key in sorted(gt_segs):
        for pred_key in sorted(pred_segs):
            if gt_key[0] != pred_key[0]:
                continue
            inter = len(gt_segs[gt_key] & pred_segs[pred_key])
            if inter == 0:
                continue
            union = (
                len(gt_segs[gt_key]) + len(pred_segs[pred_key])
                - inter - void_overlap[pred_key]
            )
            iou = inter / union
            if iou > 0.5:
                tp.setdefault(gt_key[0], []).append((pred_key, gt_key, iou))
                matched_p.add(pred_key)
                matched_g.add(gt_key)

    fp: dict[int, list] = {}
    for pred_key in sorted(pred_segs):
        if pred_key in matched_p:
            continue
        if void_overlap[pred_key] / len(pred_segs[pred_key]) > 0.5:
            continue
        fp.setdefault(pred_key[0], []).append(pred_key)

    fn: dict[int, list] = {}
    for gt_key in sorted(gt_segs):
        if gt_key not in matched_g:
            fn.setdefault(gt_key[0], []).append(gt_key)

    out = {}
    for cls in sorted(set(tp) | set(fp) | set(fn)):
        out[cls] = (tp.get(cls, []), fp.get(cls, []), fn.get(cls, []))
    return out


def brute_force_pq(map_pairs, class_ids, stuff_ids, void_id):
    """Dataset-level PQ/SQ/RQ the long way around.

    Returns (per_class, all_stats, stuff_stats, things_stats) where per_class
    maps class_id -> dict with iou_sum/tp/fp/fn/pq/sq/rq, and each stats entry
    is (pq, sq, rq, n) averaged over populated classes in class_ids order.
    """
    iou_sum = {c: 0.0 for c in class_ids}
    tp = {c: 0 for c in class_ids}
    fp = {c: 0 for c in class_ids}
    fn = {c: 0 for c in class_ids}
    for pred_map, gt_map in map_pairs:
        per = brute_force_match(pred_map, gt_map, void_id)
        for cls, (tps, fps, fns) in per.items():
            for _, _, iou in tps:
                iou_sum[cls] += iou
            tp[cls] += len(tps)
            fp[cls] += len(fps)
            fn[cls] += len(fns)

    per_class = {}
    for cls in class_ids:
        denom = tp[cls] + 0.5 * fp[cls] + 0.5 * fn[cls]
        pq = iou_sum[cls] / denom if denom else 0.0
        sq = iou_sum[cls] / tp[cls] if tp[cls] else 0.0
        rq = tp[cls] / denom if denom else 0.0
        per_class[cls] = {
            "iou_sum": iou_sum[cls], "tp": tp[cls], "fp": fp[cls],
            "fn": fn[cls], "pq": pq, "sq": sq, "rq": rq,
        }

    def stats(ids):
        pop = [c for c in ids if tp[c] + fp[c] + fn[c] > 0]
        if not pop:
            return (0.0, 0.0, 0.0, 0)
        n = len(pop)
        return (
            sum(per_class[c]["pq"] for c in pop) / n,
            sum(per_class[c]["sq"] for c in pop) / n,
            sum(per_class[c]["rq"] for c in pop) / n,
            n,
        )

    stuff = [c for c in class_ids if c in stuff_ids]
    things = [c for c in class_ids if c not in stuff_ids]
    return per_class, stats(class_ids), stats(stuff), stats(things)


def naive_miou(preds, gts, class_ids, void_id):
    """Pixel-loop mean IoU; returns (per_class dict, miou)."""
    inter = {c: 0 for c in class_ids}
    union = {c: 0 for c in class_ids}
    seen = {c: 0 for c in class_ids}
    for p, g in zip(preds, gts):
        h, w = g.shape
        for y in range(h):
            for x in range(w):
                gv = int(g[y, x])
                pv = int(p[y, x])
                for c in class_ids:
                    in_g = gv == c
                    in_p = pv == c and gv != void_id
                    if in_g:
                        seen[c] += 1
                    if in_g and in_p:
                        inter[c] += 1
                    if in_g or in_p:
                        union[c] += 1
    per_class = {}
    scores = []
    for c in class_ids:
        if seen[c] == 0:
            per_class[c] = None
            continue
        per_class[c] = inter[c] / union[c]
        scores.append(per_class[c])
    return per_class, (sum(scores) / len(scores) if scores else 0.0)
