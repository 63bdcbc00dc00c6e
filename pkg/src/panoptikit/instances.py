"""Instance-head post-processing ahead of panoptic fusion.

Takes raw per-instance predictions (class, confidence, box, low-resolution
mask logits), pastes the mask logits into image space, drops low-confidence
and heavily-overlapping candidates, and builds the matching semantic logit
channel (ML_B) for each survivor.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateBoxError, FormatError
from .semantic import SemanticLogits
from .tensor import Tensor, bilinear_resize, read_ptsr, write_ptsr

__all__ = [
    "MASK_GRID",
    "InstancePrediction",
    "FusionConfig",
    "clamp_box_to_pixels",
    "paste_mask_logits",
    "filter_and_sort",
    "binary_mask",
    "suppress_overlaps",
    "build_mlb",
    "read_instance_manifest",
    "write_instance_manifest",
]

MASK_GRID = (28, 28)  # nominal mask-logit resolution emitted by the fixture tools


@dataclass(frozen=True)
class InstancePrediction:
    """One detected instance.

    ``bbox`` is ``(x1, y1, x2, y2)`` in pixel coordinates with ``x2 > x1`` and
    ``y2 > y1`` (half-open after rounding). ``mask_logits`` is any 2-D float
    grid — nominally 28x28 — stretched over the box when pasting.
    """

    class_id: int
    score: float
    bbox: tuple[float, float, float, float]
    mask_logits: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"score must be in [0, 1], got {self.score}")
        x1, y1, x2, y2 = self.bbox
        if not (x2 > x1 and y2 > y1):
            raise DegenerateBoxError(f"bbox must satisfy x2 > x1, y2 > y1: {self.bbox}")
        m = np.asarray(self.mask_logits, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise DataError(f"mask_logits must be a 2-D grid, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DataError("mask_logits contains NaN or Inf")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "mask_logits", m)
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "class_id", int(self.class_id))


@dataclass(frozen=True)
class FusionConfig:
    """Thresholds for instance filtering and panoptic canvas assembly."""

    confidence_threshold: float = 0.5
    overlap_threshold: float = 0.5
    min_stuff_area: int = 2048

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise DataError(
                f"confidence_threshold must be in [0, 1], got {self.confidence_threshold}"
            )
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise DataError(
                f"overlap_threshold must be in [0, 1], got {self.overlap_threshold}"
            )
        if self.min_stuff_area < 0:
            raise DataError(f"min_stuff_area must be >= 0, got {self.min_stuff_area}")


def _round_half_away(v: float) -> int:
    # coordinates are non-negative after clamping, so floor(v + 0.5) suffices
    return int(np.floor(v + 0.5))


def clamp_box_to_pixels(
    bbox: Sequence[float], image_h: int, image_w: int
) -> tuple[int, int, int, int]:
    """Clamp a float box to image bounds and round half-away-from-zero.

    Returns the half-open pixel box (x1, y1, x2, y2). A box that collapses to
    one pixel or less on a side raises DegenerateBoxError.
    """
    x1, y1, x2, y2 = bbox
    x1 = _round_half_away(min(max(x1, 0.0), float(image_w)))
    x2 = _round_half_away(min(max(x2, 0.0), float(image_w)))
    y1 = _round_half_away(min(max(y1, 0.0), float(image_h)))
    y2 = _round_half_away(min(max(y2, 0.0), float(image_h)))
    if x2 - x1 <= 1 or y2 - y1 <= 1:
        raise DegenerateBoxError(
            f"bbox {tuple(bbox)} degenerates to {(x1, y1, x2, y2)} "
            f"within a {image_w}x{image_h} image"
        )
    return x1, y1, x2, y2


def paste_mask_logits(
    inst: InstancePrediction, image_h: int, image_w: int
) -> Tensor:
    """Bilinearly stretch mask logits over the instance box; zero elsewhere.

    Returns a (1, 1, image_h, image_w) tensor. A box covering the full image
    reduces to a plain bilinear resize of the mask grid.
    """
    x1, y1, x2, y2 = clamp_box_to_pixels(inst.bbox, image_h, image_w)
    grid = Tensor(inst.mask_logits[None, None, :, :])
    resized = bilinear_resize(grid, y2 - y1, x2 - x1)
    canvas = np.zeros((1, 1, image_h, image_w), dtype=np.float32)
    canvas[0, 0, y1:y2, x1:x2] = resized.data[0, 0]
    return Tensor(canvas)


def filter_and_sort(
    instances: Sequence[InstancePrediction], cfg: FusionConfig
) -> list[InstancePrediction]:
    """Drop predictions scoring below the confidence threshold, sort by score.

    Scores equal to the threshold survive (only strictly-lower scores are
    discarded). The sort is descending and stable, so equal scores keep their
    input order.
    """
    kept = [i for i in instances if i.score >= cfg.confidence_threshold]
    return sorted(kept, key=lambda i: i.score, reverse=True)


def binary_mask(pasted_logits: Tensor) -> np.ndarray:
    """Binarize pasted logits: sigmoid(x) > 0.5, i.e. x > 0."""
    return pasted_logits.data[0, 0] > 0.0


def suppress_overlaps(
    pasted: Sequence[tuple[InstancePrediction, Tensor]],
    cfg: FusionConfig,
) -> list[tuple[InstancePrediction, Tensor]]:
    """Greedy overlap suppression over score-sorted pasted instances.

    Walking from the highest score down, a candidate is discarded when the
    fraction of its thresholded mask already covered by the union of retained
    masks exceeds the overlap threshold; otherwise it is retained and its mask
    joins the union. Candidates whose thresholded mask is empty are retained
    (their overlap ratio is defined as 0).
    """
    scores = [inst.score for inst, _ in pasted]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise DataError("suppress_overlaps expects instances sorted by descending score")
    union: np.ndarray | None = None
    kept: list[tuple[InstancePrediction, Tensor]] = []
    for inst, logits in pasted:
        mask = binary_mask(logits)
        if union is None:
            union = np.zeros_like(mask)
        area = int(mask.sum())
        overlap = int((mask & union).sum()) if area else 0
        ratio = overlap / area if area else 0.0
        if ratio > cfg.overlap_threshold:
            continue
        kept.append((inst, logits))
        union |= mask
    return kept


def build_mlb(semantic: SemanticLogits, inst: InstancePrediction) -> Tensor:
    """Semantic logit channel for the instance's class, zeroed outside its box."""
    _, _, h, w = semantic.scores.dims
    channel = semantic.channel_for(inst.class_id)
    x1, y1, x2, y2 = clamp_box_to_pixels(inst.bbox, h, w)
    out = np.zeros((1, 1, h, w), dtype=np.float32)
    out[0, 0, y1:y2, x1:x2] = semantic.scores.data[0, channel, y1:y2, x1:x2]
    return Tensor(out)


# ---------------------------------------------------------------------------
# instance manifest: one text record per instance, masks as PTSR sidecars
#
#   instance class_id=26 score=0.910000 bbox=12.0,8.5,200.0,150.0 mask=masks/i00.ptsr


def write_instance_manifest(
    path,
    instances: Sequence[InstancePrediction],
    mask_dir_name: str = "masks",
) -> list[Path]:
    """Write the manifest and its mask tensors; returns every path written."""
    path = Path(path)
    mask_dir = path.parent / mask_dir_name
    mask_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    written = []
    for idx, inst in enumerate(instances):
        rel = f"{mask_dir_name}/{path.stem}_m{idx:03d}.ptsr"
        write_ptsr(path.parent / rel, Tensor(inst.mask_logits[None, None, :, :]))
        written.append(path.parent / rel)
        bbox = ",".join(f"{v:.6f}" for v in inst.bbox)
        lines.append(
            f"instance class_id={inst.class_id} score={inst.score:.6f} "
            f"bbox={bbox} mask={rel}"
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return [path] + written


def read_instance_manifest(path) -> list[InstancePrediction]:
    """Parse an instance manifest; mask paths resolve relative to it."""
    path = Path(path)
    instances = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] != "instance":
            raise FormatError(
                f"expected line to start with 'instance', got {tokens[0]!r}",
                path=path, line=lineno,
            )
        fields: dict[str, str] = {}
        for token in tokens[1:]:
            if "=" not in token:
                raise FormatError(
                    f"expected key=value, got {token!r}", path=path, line=lineno
                )
            key, value = token.split("=", 1)
            fields[key] = value
        try:
            class_id = int(fields.pop("class_id"))
            score = float(fields.pop("score"))
            bbox = tuple(float(v) for v in fields.pop("bbox").split(","))
            mask_rel = fields.pop("mask")
        except KeyError as exc:
            raise FormatError(f"missing field {exc}", path=path, line=lineno) from exc
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        if len(bbox) != 4:
            raise FormatError(
                f"bbox needs 4 comma-separated values, got {len(bbox)}",
                path=path, line=lineno,
            )
        if fields:
            raise FormatError(
                f"unknown fields {sorted(fields)}", path=path, line=lineno
            )
        mask_path = path.parent / mask_rel
        if not mask_path.exists():
            raise FormatError(
                f"missing mask file {mask_path}", path=path, line=lineno
            )
        mask = read_ptsr(mask_path)
        if mask.dims[0] != 1 or mask.dims[1] != 1:
            raise FormatError(
                f"mask tensor must have dims (1, 1, h, w), got {mask.dims}",
                path=mask_path,
            )
        try:
            instances.append(
                InstancePrediction(class_id, score, bbox, mask.data[0, 0])
            )
        except DataError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
    return instances
