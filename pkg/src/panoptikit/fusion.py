"""Adaptive fusion of instance and semantic logits, and canvas assembly.

The fusion law combines the pasted instance-mask logits ``ML_A`` with the
box-restricted semantic channel ``ML_B`` as::

    FL = (sigmoid(ML_A) + sigmoid(ML_B)) * (ML_A + ML_B)

so both heads modulate a shared sum: the result keeps the sign of
``ML_A + ML_B`` and is amplified where the heads agree. ``add`` and
``multiply`` are the reference ablations, and ``baseline`` bypasses logit
mixing entirely (instance masks always win their pixels).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .instances import FusionConfig, InstancePrediction, binary_mask
from .panio import ClassConfig, PanopticMap, _compact_instances
from .semantic import SemanticLogits
from .tensor import Tensor, _sigmoid64

__all__ = [
    "FUSION_STRATEGIES",
    "fuse_adaptive",
    "fuse_alternative",
    "assemble_panoptic",
    "assemble_baseline",
]

FUSION_STRATEGIES = ("adaptive", "add", "multiply", "baseline")


def _check_same_dims(ml_a: Tensor, ml_b: Tensor) -> None:
    if ml_a.dims != ml_b.dims:
        raise ShapeError(
            "fusion inputs must share dims", expected=ml_a.dims, actual=ml_b.dims
        )


def fuse_adaptive(ml_a: Tensor, ml_b: Tensor) -> Tensor:
    """(sigmoid(a) + sigmoid(b)) * (a + b), elementwise in float64."""
    _check_same_dims(ml_a, ml_b)
    a = ml_a.data.astype(np.float64)
    b = ml_b.data.astype(np.float64)
    out = (_sigmoid64(a) + _sigmoid64(b)) * (a + b)
    return Tensor(out.astype(np.float32))


def fuse_alternative(ml_a: Tensor, ml_b: Tensor, strategy: str) -> Tensor:
    """Reference ablations: plain 'add' or 'multiply' of the two logit maps."""
    _check_same_dims(ml_a, ml_b)
    a = ml_a.data.astype(np.float64)
    b = ml_b.data.astype(np.float64)
    if strategy == "add":
        out = a + b
    elif strategy == "multiply":
        out = a * b
    else:
        raise ConfigError(
            f"unknown fusion strategy {strategy!r}; expected 'add' or 'multiply'"
        )
    return Tensor(out.astype(np.float32))


def _fill_stuff(
    class_map: np.ndarray,
    remaining: np.ndarray,
    semantic: SemanticLogits,
    classes: ClassConfig,
    cfg: FusionConfig,
) -> None:
    """Assign stuff classes to unclaimed pixels, subject to the area floor.

    A remaining pixel takes its semantic argmax class if that class is stuff
    and the class's total would-be area in this image reaches
    ``min_stuff_area``; otherwise the pixel stays void. Remaining pixels whose
    semantic argmax is a thing class stay void (no instance claimed them).
    """
    sem_idx = np.argmax(semantic.scores.data[0], axis=0)
    lut = np.asarray(semantic.class_ids, dtype=np.int32)
    sem_cls = lut[sem_idx]
    for cid in classes.stuff_ids:
        sel = remaining & (sem_cls == cid)
        area = int(sel.sum())
        if area and area >= cfg.min_stuff_area:
            class_map[sel] = cid


def assemble_panoptic(
    fused_instances: Sequence[tuple[int, Tensor]],
    semantic: SemanticLogits,
    classes: ClassConfig,
    cfg: FusionConfig,
) -> PanopticMap:
    """Argmax the fused instance channels against the stuff channels.

    ``fused_instances`` are ``(class_id, fused_logits)`` pairs in suppression
    (descending-score) order; each fused map is (1, 1, H, W). The channel
    stack is [instances..., stuff channels in registry order] and per-pixel
    argmax ties resolve to the lowest channel index, so instances shade stuff
    and earlier instances shade later ones. Winning instances are renumbered
    1..K in order; instances that win no pixels consume no id.
    """
    _, _, h, w = semantic.scores.dims
    k = len(fused_instances)
    layers = []
    for idx, (cid, fused) in enumerate(fused_instances):
        if fused.dims != (1, 1, h, w):
            raise ShapeError(
                f"fused instance {idx} dims do not match the semantic grid",
                expected=(1, 1, h, w),
                actual=fused.dims,
            )
        if not classes.is_thing(cid):
            raise DataError(f"instance {idx} has non-thing class {cid}")
        layers.append(fused.data[0, 0])
    stuff_channels = [
        semantic.channel_for(cid) for cid in classes.stuff_ids
    ]
    layers.extend(semantic.scores.data[0, ch] for ch in stuff_channels)

    class_map = np.full((h, w), classes.void_id, dtype=np.int32)
    instance_map = np.zeros((h, w), dtype=np.int32)
    if layers:
        stack = np.stack(layers)
        winner = np.argmax(stack, axis=0)
        claimed = winner < k
        for idx, (cid, _) in enumerate(fused_instances):
            sel = winner == idx
            class_map[sel] = cid
            instance_map[sel] = idx + 1
    else:
        claimed = np.zeros((h, w), dtype=bool)

    _fill_stuff(class_map, ~claimed, semantic, classes, cfg)
    instance_map = _compact_instances(instance_map)
    pmap = PanopticMap(class_map, instance_map, classes.void_id)
    pmap.validate(classes)
    return pmap


def assemble_baseline(
    kept: Sequence[tuple[InstancePrediction, Tensor]],
    semantic: SemanticLogits,
    classes: ClassConfig,
    cfg: FusionConfig,
) -> PanopticMap:
    """No-mixing baseline: thresholded instance masks always win their pixels.

    Instances claim pixels in score order (first claim wins); unclaimed pixels
    follow the same stuff/void rule as the fused path. The semantic head's
    scores never compete with instance interiors.
    """
    _, _, h, w = semantic.scores.dims
    class_map = np.full((h, w), classes.void_id, dtype=np.int32)
    instance_map = np.zeros((h, w), dtype=np.int32)
    claimed = np.zeros((h, w), dtype=bool)
    for idx, (inst, logits) in enumerate(kept):
        if logits.dims != (1, 1, h, w):
            raise ShapeError(
                f"pasted instance {idx} dims do not match the semantic grid",
                expected=(1, 1, h, w),
                actual=logits.dims,
            )
        if not classes.is_thing(inst.class_id):
            raise DataError(f"instance {idx} has non-thing class {inst.class_id}")
        sel = binary_mask(logits) & ~claimed
        class_map[sel] = inst.class_id
        instance_map[sel] = idx + 1
        claimed |= sel
    _fill_stuff(class_map, ~claimed, semantic, classes, cfg)
    instance_map = _compact_instances(instance_map)
    pmap = PanopticMap(class_map, instance_map, classes.void_id)
    pmap.validate(classes)
    return pmap
