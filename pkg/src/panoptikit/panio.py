"""Dataset and artifact I/O: class registry, panoptic PNG codec, fixtures.

Panoptic maps travel as 8-bit RGB PNGs where each pixel stores a segment id
``id = R + 256*G + 256^2*B`` (void is id 0), plus a sidecar text manifest
mapping ids to ``(class_id, is_thing, instance index)``. Stuff segments use
``id == class_id``; thing segments use ``id == class_id + 1000 * instance``,
which is reversible because class ids are required to stay below 1000.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    InvariantError,
)

__all__ = [
    "ClassDef",
    "ClassConfig",
    "PanopticMap",
    "load_class_config",
    "save_class_config",
    "default_class_config",
    "small_class_config",
    "segment_id",
    "split_segment_id",
    "write_panoptic_png",
    "read_panoptic_png",
    "manifest_path_for",
    "random_panoptic_map",
    "perturb_panoptic_map",
]

THING_ID_STRIDE = 1000
MAX_SEGMENT_ID = (1 << 24) - 1


@dataclass(frozen=True)
class ClassDef:
    class_id: int
    name: str
    is_thing: bool
    color: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.class_id < 0:
            raise ConfigError(f"class id must be >= 0, got {self.class_id}")
        if not self.name:
            raise ConfigError("class name must be non-empty")
        color = tuple(int(c) for c in self.color)
        if len(color) != 3 or any(not 0 <= c <= 255 for c in color):
            raise ConfigError(f"color must be three bytes, got {self.color}")
        object.__setattr__(self, "color", color)


@dataclass(frozen=True)
class ClassConfig:
    """Ordered class registry plus the void sentinel id."""

    classes: tuple[ClassDef, ...]
    void_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigError("class ids must be unique")
        if self.void_id in ids:
            raise ConfigError(
                f"void id {self.void_id} collides with a class id"
            )
        if not self.classes:
            raise ConfigError("class registry must contain at least one class")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes)

    @property
    def stuff_ids(self) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes if not c.is_thing)

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes if c.is_thing)

    @property
    def n_stuff(self) -> int:
        return len(self.stuff_ids)

    @property
    def n_thing(self) -> int:
        return len(self.thing_ids)

    def get(self, class_id: int) -> ClassDef:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise ConfigError(f"unknown class id {class_id}")

    def is_thing(self, class_id: int) -> bool:
        return self.get(class_id).is_thing


@dataclass(frozen=True)
class PanopticMap:
    """Per-pixel (class, instance) labeling.

    ``instance_map`` is nonzero only on thing pixels; instance ids are 1..K
    without gaps (checked by :meth:`validate`, which needs the class registry
    to know which classes are things).
    """

    class_map: np.ndarray
    instance_map: np.ndarray
    void_id: int = 0

    def __post_init__(self):
        cm = np.asarray(self.class_map)
        im = np.asarray(self.instance_map)
        if cm.ndim != 2 or cm.shape != im.shape:
            raise DataError(
                f"class/instance maps must be equal-shaped 2-D arrays, got "
                f"{cm.shape} and {im.shape}"
            )
        cm = cm.astype(np.int32, copy=True)
        im = im.astype(np.int32, copy=True)
        if im.min(initial=0) < 0:
            raise DataError("instance ids must be >= 0")
        cm.flags.writeable = False
        im.flags.writeable = False
        object.__setattr__(self, "class_map", cm)
        object.__setattr__(self, "instance_map", im)

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_map.shape

    def validate(self, classes: ClassConfig) -> None:
        """Check map invariants against a class registry."""
        if self.void_id != classes.void_id:
            raise InvariantError(
                f"map void id {self.void_id} != registry void id {classes.void_id}"
            )
        known = set(classes.class_ids) | {self.void_id}
        present = set(np.unique(self.class_map).tolist())
        unknown = present - known
        if unknown:
            raise InvariantError(f"class map holds unknown class ids {sorted(unknown)}")
        thing = np.isin(self.class_map, np.asarray(classes.thing_ids, dtype=np.int32))
        if np.any((self.instance_map > 0) & ~thing):
            raise InvariantError("instance ids present on non-thing pixels")
        ids = np.unique(self.instance_map)
        ids = ids[ids > 0]
        if ids.size and not np.array_equal(ids, np.arange(1, ids.size + 1)):
            raise InvariantError(
                f"instance ids must be contiguous 1..K, got {ids.tolist()}"
            )


# ---------------------------------------------------------------------------
# class config files
#
#   void 0
#   class id=7 name=road thing=no color=128,64,128

_BOOLS = {"yes": True, "no": False}


def save_class_config(config: ClassConfig, path) -> None:
    lines = [f"void {config.void_id}"]
    for c in config.classes:
        color = ",".join(str(v) for v in c.color)
        thing = "yes" if c.is_thing else "no"
        lines.append(
            f"class id={c.class_id} name={c.name} thing={thing} color={color}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_class_config(path) -> ClassConfig:
    path = Path(path)
    void_id: int | None = None
    classes: list[ClassDef] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "void":
            if len(tokens) != 2:
                raise FormatError("void line takes exactly one id", path=path,
                                  line=lineno)
            try:
                void_id = int(tokens[1])
            except ValueError as exc:
                raise FormatError(str(exc), path=path, line=lineno) from exc
            continue
        if tokens[0] != "class":
            raise FormatError(
                f"expected 'void' or 'class', got {tokens[0]!r}",
                path=path, line=lineno,
            )
        fields: dict[str, str] = {}
        for token in tokens[1:]:
            if "=" not in token:
                raise FormatError(f"expected key=value, got {token!r}",
                                  path=path, line=lineno)
            key, value = token.split("=", 1)
            fields[key] = value
        try:
            cid = int(fields.pop("id"))
            name = fields.pop("name")
            thing = _BOOLS[fields.pop("thing").lower()]
            color = tuple(int(v) for v in fields.pop("color", "0,0,0").split(","))
            classes.append(ClassDef(cid, name, thing, color))
        except KeyError as exc:
            raise FormatError(f"missing or bad field {exc}", path=path,
                              line=lineno) from exc
        except (ValueError, ConfigError) as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        if fields:
            raise FormatError(f"unknown fields {sorted(fields)}", path=path,
                              line=lineno)
    if void_id is None:
        raise FormatError("config never declares the void id", path=path)
    try:
        return ClassConfig(tuple(classes), void_id)
    except ConfigError as exc:
        raise FormatError(str(exc), path=path) from exc


def default_class_config() -> ClassConfig:
    """The bundled 19-class urban-scene registry (11 stuff + 8 things)."""
    return load_class_config(Path(__file__).parent / "data" / "cityscapes.classes")


def small_class_config(n_stuff: int = 4, n_thing: int = 3, void_id: int = 0) -> ClassConfig:
    """Compact synthetic registry for fixtures and tests."""
    classes = []
    for i in range(n_stuff):
        classes.append(ClassDef(i + 1, f"stuff{i}", False, (i * 23 % 256, 80, 40)))
    for i in range(n_thing):
        classes.append(
            ClassDef(n_stuff + i + 1, f"thing{i}", True, (40, i * 31 % 256, 90))
        )
    return ClassConfig(tuple(classes), void_id)


# ---------------------------------------------------------------------------
# panoptic PNG codec


def segment_id(class_id: int, is_thing: bool, instance: int) -> int:
    if class_id >= THING_ID_STRIDE:
        raise DataError(
            f"class id {class_id} >= {THING_ID_STRIDE} cannot be encoded"
        )
    if not is_thing:
        return class_id
    if instance < 1:
        raise DataError(f"thing instance index must be >= 1, got {instance}")
    return class_id + THING_ID_STRIDE * instance


def split_segment_id(seg_id: int, is_thing: bool) -> tuple[int, int]:
    if is_thing:
        return seg_id % THING_ID_STRIDE, seg_id // THING_ID_STRIDE
    return seg_id, 0


def manifest_path_for(png_path) -> Path:
    return Path(png_path).with_suffix(".segments")


def write_panoptic_png(
    pmap: PanopticMap,
    classes: ClassConfig,
    png_path,
    manifest_path=None,
) -> list[Path]:
    """Encode a panoptic map as id-PNG plus sidecar manifest.

    Returns the paths written. More than 2^24 - 1 distinct segment ids cannot
    be represented in 8-bit RGB and raise DataError.
    """
    pmap.validate(classes)
    png_path = Path(png_path)
    manifest_path = Path(manifest_path) if manifest_path else manifest_path_for(png_path)

    thing_lut = {c.class_id: c.is_thing for c in classes.classes}
    ids = np.zeros(pmap.shape, dtype=np.int64)
    records: dict[int, tuple[int, bool, int]] = {}
    for cid in np.unique(pmap.class_map):
        cid = int(cid)
        if cid == pmap.void_id:
            continue
        sel = pmap.class_map == cid
        if not thing_lut[cid]:
            sid = segment_id(cid, False, 0)
            ids[sel] = sid
            records[sid] = (cid, False, 0)
        else:
            for inst in np.unique(pmap.instance_map[sel]):
                inst = int(inst)
                if inst == 0:
                    continue  # unclaimed thing pixels encode as void
                sid = segment_id(cid, True, inst)
                ids[sel & (pmap.instance_map == inst)] = sid
                records[sid] = (cid, True, inst)
    if ids.max(initial=0) > MAX_SEGMENT_ID:
        raise DataError(
            f"segment id {int(ids.max())} exceeds the RGB limit {MAX_SEGMENT_ID}"
        )

    rgb = np.zeros(pmap.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = ids % 256
    rgb[..., 1] = (ids // 256) % 256
    rgb[..., 2] = ids // 65536
    Image.fromarray(rgb, mode="RGB").save(png_path, format="PNG")

    lines = []
    for sid in sorted(records):
        cid, is_thing, inst = records[sid]
        thing = "yes" if is_thing else "no"
        lines.append(f"segment id={sid} class={cid} thing={thing} instance={inst}")
    manifest_path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return [png_path, manifest_path]


def _read_manifest(path) -> dict[int, tuple[int, bool, int]]:
    path = Path(path)
    records: dict[int, tuple[int, bool, int]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] != "segment":
            raise FormatError(
                f"expected line to start with 'segment', got {tokens[0]!r}",
                path=path, line=lineno,
            )
        fields: dict[str, str] = {}
        for token in tokens[1:]:
            if "=" not in token:
                raise FormatError(f"expected key=value, got {token!r}",
                                  path=path, line=lineno)
            key, value = token.split("=", 1)
            fields[key] = value
        try:
            sid = int(fields["id"])
            cid = int(fields["class"])
            thing = _BOOLS[fields["thing"].lower()]
            inst = int(fields["instance"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad segment record: {exc}", path=path,
                              line=lineno) from exc
        if sid in records:
            raise FormatError(f"duplicate segment id {sid}", path=path, line=lineno)
        if not thing and inst != 0:
            raise FormatError(
                f"stuff segment {sid} carries instance index {inst}",
                path=path, line=lineno,
            )
        try:
            expected = segment_id(cid, thing, inst)
        except DataError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        if sid != expected:
            raise FormatError(
                f"segment id {sid} inconsistent with class={cid} instance={inst}",
                path=path, line=lineno,
            )
        records[sid] = (cid, thing, inst)
    return records


def read_panoptic_png(
    png_path,
    classes: ClassConfig,
    manifest_path=None,
) -> PanopticMap:
    """Decode an id-PNG + manifest back into a PanopticMap."""
    png_path = Path(png_path)
    manifest_path = Path(manifest_path) if manifest_path else manifest_path_for(png_path)
    if not manifest_path.exists():
        raise FormatError(f"missing segment manifest {manifest_path}", path=png_path)
    records = _read_manifest(manifest_path)

    try:
        with Image.open(png_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.int64)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"not a decodable PNG: {exc}", path=png_path) from exc
    ids = rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]

    class_map = np.full(ids.shape, classes.void_id, dtype=np.int32)
    instance_map = np.zeros(ids.shape, dtype=np.int32)
    present = np.unique(ids)
    for sid in present.tolist():
        if sid == 0:
            continue
        if sid not in records:
            raise FormatError(
                f"pixel segment id {sid} missing from manifest", path=png_path
            )
        cid, thing, inst = records[sid]
        try:
            cdef = classes.get(cid)
        except ConfigError as exc:
            raise FormatError(str(exc), path=manifest_path) from exc
        if cdef.is_thing != thing:
            raise FormatError(
                f"segment {sid}: thing flag disagrees with class registry",
                path=manifest_path,
            )
        sel = ids == sid
        class_map[sel] = cid
        instance_map[sel] = inst
    pmap = PanopticMap(class_map, instance_map, classes.void_id)
    try:
        pmap.validate(classes)
    except InvariantError as exc:
        raise FormatError(str(exc), path=png_path) from exc
    return pmap


# ---------------------------------------------------------------------------
# random fixtures


def _compact_instances(instance_map) -> np.ndarray:
    """Relabel instance ids to contiguous 1..K (ascending original id)."""
    out = np.zeros_like(instance_map)
    next_id = 1
    for old in np.unique(instance_map):
        if old == 0:
            continue
        sel = instance_map == old
        if not sel.any():
            continue
        out[sel] = next_id
        next_id += 1
    return out


def random_panoptic_map(
    rng: np.random.Generator,
    height: int,
    width: int,
    classes: ClassConfig,
    max_instances: int = 5,
    void_patch: bool = False,
) -> PanopticMap:
    """Blocky random stuff background with up to ``max_instances`` rectangles."""
    stuff = np.asarray(classes.stuff_ids, dtype=np.int32)
    things = np.asarray(classes.thing_ids, dtype=np.int32)
    gh, gw = max(1, height // 4), max(1, width // 4)
    grid = rng.choice(stuff, size=(gh, gw))
    class_map = np.repeat(np.repeat(grid, 4, axis=0), 4, axis=1)[:height, :width]
    if class_map.shape != (height, width):  # pad if height/width not multiples of 4
        pad_h = height - class_map.shape[0]
        pad_w = width - class_map.shape[1]
        class_map = np.pad(class_map, ((0, pad_h), (0, pad_w)), mode="edge")
    instance_map = np.zeros((height, width), dtype=np.int32)

    n_inst = int(rng.integers(0, max_instances + 1))
    next_id = 1
    for _ in range(n_inst):
        h = int(rng.integers(2, max(3, height // 2)))
        w = int(rng.integers(2, max(3, width // 2)))
        y = int(rng.integers(0, height - h + 1))
        x = int(rng.integers(0, width - w + 1))
        cid = int(rng.choice(things))
        class_map[y : y + h, x : x + w] = cid
        instance_map[y : y + h, x : x + w] = next_id
        next_id += 1

    if void_patch:
        h = int(rng.integers(2, max(3, height // 3)))
        w = int(rng.integers(2, max(3, width // 3)))
        y = int(rng.integers(0, height - h + 1))
        x = int(rng.integers(0, width - w + 1))
        class_map[y : y + h, x : x + w] = classes.void_id
        instance_map[y : y + h, x : x + w] = 0

    instance_map = _compact_instances(instance_map)
    return PanopticMap(class_map, instance_map, classes.void_id)


def perturb_panoptic_map(
    rng: np.random.Generator,
    pmap: PanopticMap,
    classes: ClassConfig,
) -> PanopticMap:
    """Damage a map with a few random edits (for matcher fixtures)."""
    height, width = pmap.shape
    class_map = pmap.class_map.copy()
    instance_map = pmap.instance_map.copy()
    stuff = np.asarray(classes.stuff_ids, dtype=np.int32)
    things = np.asarray(classes.thing_ids, dtype=np.int32)

    for _ in range(int(rng.integers(1, 4))):
        kind = int(rng.integers(0, 3))
        h = int(rng.integers(2, max(3, height // 2)))
        w = int(rng.integers(2, max(3, width // 2)))
        y = int(rng.integers(0, height - h + 1))
        x = int(rng.integers(0, width - w + 1))
        box = (slice(y, y + h), slice(x, x + w))
        if kind == 0:  # relabel patch to random stuff
            class_map[box] = int(rng.choice(stuff))
            instance_map[box] = 0
        elif kind == 1:  # spurious new instance
            class_map[box] = int(rng.choice(things))
            instance_map[box] = instance_map.max() + 1
        else:  # erase one existing instance entirely
            ids = np.unique(instance_map)
            ids = ids[ids > 0]
            if ids.size:
                victim = int(rng.choice(ids))
                sel = instance_map == victim
                class_map[sel] = int(rng.choice(stuff))
                instance_map[sel] = 0

    instance_map = _compact_instances(instance_map)
    return PanopticMap(class_map, instance_map, classes.void_id)
