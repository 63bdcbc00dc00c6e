"""Deterministic synthetic scenes for exercising the fuse/eval/forward paths.

A scene bundles a ground-truth panoptic map, semantic scores correlated with
it, and instance predictions (including low-confidence distractors and a
near-duplicate to exercise suppression). Everything derives from a single
seed, so identical seeds give bit-identical artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instances import MASK_GRID, InstancePrediction
from .panio import ClassConfig, PanopticMap, _compact_instances
from .semantic import SemanticLogits
from .tensor import Tensor, bilinear_resize, channel_softmax

__all__ = ["Scene", "generate_scene"]


@dataclass(frozen=True)
class Scene:
    gt: PanopticMap
    semantic: SemanticLogits
    instances: tuple[InstancePrediction, ...]


def _paint_ground_truth(rng, classes, height, width, n_instances):
    stuff = list(classes.stuff_ids)
    things = list(classes.thing_ids)
    class_map = np.zeros((height, width), dtype=np.int32)
    instance_map = np.zeros((height, width), dtype=np.int32)

    # horizontal stuff bands with lightly jittered boundaries, so each band
    # keeps a large area (the default stuff-area floor stays meaningful)
    n_bands = min(3, len(stuff))
    band_classes = rng.choice(stuff, size=n_bands, replace=False)
    edges = [0]
    for b in range(1, n_bands):
        nominal = b * height // n_bands
        edges.append(nominal + int(rng.integers(-height // 16, height // 16 + 1)))
    edges.append(height)
    for b in range(n_bands):
        class_map[edges[b] : edges[b + 1], :] = band_classes[b]

    # elliptical thing instances, later ones shading earlier ones
    next_id = 1
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(n_instances):
        bw = int(rng.integers(max(6, width // 6), max(8, width // 3)))
        bh = int(rng.integers(max(6, height // 6), max(8, height // 3)))
        x1 = int(rng.integers(0, width - bw + 1))
        y1 = int(rng.integers(0, height - bh + 1))
        cx, cy = x1 + bw / 2.0, y1 + bh / 2.0
        rx, ry = bw / 2.0, bh / 2.0
        ellipse = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        class_map[ellipse] = int(rng.choice(things))
        instance_map[ellipse] = next_id
        next_id += 1

    instance_map = _compact_instances(instance_map)
    return PanopticMap(class_map, instance_map, classes.void_id)


def _mask_logits_for(gt: PanopticMap, instance_id: int, bbox, rng) -> np.ndarray:
    x1, y1, x2, y2 = bbox
    patch = (gt.instance_map[y1:y2, x1:x2] == instance_id).astype(np.float32)
    grid = bilinear_resize(Tensor(patch[None, None]), *MASK_GRID)
    logits = 8.0 * grid.data[0, 0] - 4.0  # {0,1} -> {-4,+4}
    logits += rng.normal(0.0, 0.3, logits.shape)
    return logits.astype(np.float32)


def generate_scene(
    seed: int,
    classes: ClassConfig,
    height: int = 96,
    width: int = 160,
    n_instances: int = 3,
    n_distractors: int = 2,
) -> Scene:
    """Build one seeded scene (ground truth, semantic scores, predictions)."""
    rng = np.random.default_rng(seed)
    gt = _paint_ground_truth(rng, classes, height, width, n_instances)

    # semantic scores: softmax over noisy logits boosted along the ground truth
    logits = rng.normal(0.0, 0.4, (1, len(classes.classes), height, width))
    for channel, cdef in enumerate(classes.classes):
        logits[0, channel][gt.class_map == cdef.class_id] += 3.5
    semantic = SemanticLogits(
        channel_softmax(Tensor(logits.astype(np.float32))),
        classes.class_ids,
    )

    instances: list[InstancePrediction] = []
    present = np.unique(gt.instance_map)
    present = present[present > 0]
    for inst_id in present.tolist():
        sel = gt.instance_map == inst_id
        rows, cols = np.nonzero(sel)
        cid = int(gt.class_map[rows[0], cols[0]])
        x1, x2 = int(cols.min()), int(cols.max()) + 1
        y1, y2 = int(rows.min()), int(rows.max()) + 1
        x2 = min(width, max(x2, x1 + 2))
        y2 = min(height, max(y2, y1 + 2))
        x1 = min(x1, x2 - 2)
        y1 = min(y1, y2 - 2)
        bbox = (x1, y1, x2, y2)
        score = float(rng.uniform(0.62, 0.97))
        instances.append(
            InstancePrediction(
                cid, score, tuple(float(v) for v in bbox),
                _mask_logits_for(gt, inst_id, bbox, rng),
            )
        )

    if instances:
        # a near-duplicate of the first instance, slightly weaker: the overlap
        # suppression stage should drop it
        twin = instances[0]
        instances.append(
            InstancePrediction(
                twin.class_id,
                max(0.0, twin.score - 0.03),
                twin.bbox,
                np.asarray(twin.mask_logits)
                + rng.normal(0.0, 0.05, twin.mask_logits.shape).astype(np.float32),
            )
        )

    things = list(classes.thing_ids)
    for _ in range(n_distractors):
        bw = int(rng.integers(6, max(8, width // 4)))
        bh = int(rng.integers(6, max(8, height // 4)))
        x1 = int(rng.integers(0, width - bw + 1))
        y1 = int(rng.integers(0, height - bh + 1))
        instances.append(
            InstancePrediction(
                int(rng.choice(things)),
                float(rng.uniform(0.05, 0.45)),
                (float(x1), float(y1), float(x1 + bw), float(y1 + bh)),
                rng.normal(-1.0, 1.0, MASK_GRID).astype(np.float32),
            )
        )

    return Scene(gt, semantic, tuple(instances))
