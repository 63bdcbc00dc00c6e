"""Two-way feature pyramid and the semantic segmentation head.

The pipeline consumes four encoder feature maps at strides x4/x8/x16/x32,
runs a pair of parallel pyramid branches (top-down and bottom-up), and feeds
the resulting 256-channel pyramid into a mixed DPC/LSFE head that emits a
per-pixel class distribution at the declared input resolution.

Head wiring (documented here and in the README because the upstream figure is
ambiguous about the alignment connections)::

    s32 = proj32(dpc(P32))                  # 128 ch @ x32
    s16 = proj16(dpc(P16))                  # 128 ch @ x16
    s8  = lsfe(P8) + mc(s16)                # 128 ch @ x8   (mc upsamples 2x)
    s4  = lsfe(P4) + mc(s8)                 # 128 ch @ x4   (cascaded sum)
    cat = concat(up(s32), up(s16), up(s8), s4)        # 512 ch @ x4
    out = channel_softmax(up4(classifier_1x1(cat)))   # n_classes @ x1

Each stream reaches the x4 grid in a single bilinear step.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .blocks import (
    REQUIRED_LAYERS,
    BlockWeights,
    LayerParams,
    conv_unit,
    dpc_forward,
    lsfe_forward,
    mc_forward,
    sep_unit,
)
from .errors import ConfigError, FormatError, ShapeError
from .tensor import (
    ConvSpec,
    Tensor,
    add,
    bilinear_resize,
    channel_softmax,
    concat_channels,
    conv2d,
    read_ptsr,
    write_ptsr,
)

__all__ = [
    "PYRAMID_CHANNELS",
    "HEAD_CHANNELS",
    "LEVELS",
    "EncoderFeatures",
    "PyramidFeatures",
    "SemanticLogits",
    "FpnWeights",
    "SemanticHeadWeights",
    "SemanticPipelineWeights",
    "two_way_fpn_forward",
    "semantic_head_features",
    "semantic_head_forward",
    "semantic_pipeline_forward",
    "generate_encoder_features",
    "make_fpn_weights",
    "make_head_weights",
    "make_pipeline_weights",
    "save_weight_bundle",
    "load_weight_bundle",
]

PYRAMID_CHANNELS = 256
HEAD_CHANNELS = 128
LEVELS = (4, 8, 16, 32)
DEFAULT_ENCODER_CHANNELS = (40, 64, 176, 2048)


@dataclass(frozen=True)
class EncoderFeatures:
    """Backbone outputs at strides x4/x8/x16/x32 of a declared resolution."""

    input_hw: tuple[int, int]
    f4: Tensor
    f8: Tensor
    f16: Tensor
    f32: Tensor

    def __post_init__(self):
        h, w = self.input_hw
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ShapeError(
                "declared input resolution must be a positive multiple of 32",
                actual=(h, w),
            )
        for level, t in self.levels():
            want = (h // level, w // level)
            if t.dims[2:] != want:
                raise ShapeError(
                    f"level x{level} spatial dims inconsistent with input "
                    f"resolution {self.input_hw}",
                    expected=want,
                    actual=t.dims[2:],
                )
            if t.dims[0] != self.f4.dims[0]:
                raise ShapeError(
                    "all levels must share the batch dim",
                    expected=(self.f4.dims[0],),
                    actual=(t.dims[0],),
                )

    def levels(self):
        return ((4, self.f4), (8, self.f8), (16, self.f16), (32, self.f32))


@dataclass(frozen=True)
class PyramidFeatures:
    """Fused pyramid: four levels, each with exactly 256 channels."""

    p4: Tensor
    p8: Tensor
    p16: Tensor
    p32: Tensor

    def __post_init__(self):
        for level, t in self.levels():
            if t.dims[1] != PYRAMID_CHANNELS:
                raise ShapeError(
                    f"pyramid level x{level} must have {PYRAMID_CHANNELS} channels",
                    expected=(PYRAMID_CHANNELS,),
                    actual=(t.dims[1],),
                )

    def levels(self):
        return ((4, self.p4), (8, self.p8), (16, self.p16), (32, self.p32))


@dataclass(frozen=True)
class SemanticLogits:
    """Per-pixel class scores plus the channel -> class-id binding."""

    scores: Tensor
    class_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if len(self.class_ids) != self.scores.dims[1]:
            raise ShapeError(
                "class_ids length must equal the channel count",
                expected=(self.scores.dims[1],),
                actual=(len(self.class_ids),),
            )
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ConfigError("class_ids contains duplicates")

    def channel_for(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ConfigError(
                f"class {class_id} has no semantic channel"
            ) from None


@dataclass(frozen=True)
class FpnWeights:
    """Laterals for both branches plus the per-level output convs."""

    td_lateral: Mapping[int, BlockWeights]
    bu_lateral: Mapping[int, BlockWeights]
    output: Mapping[int, BlockWeights]

    def __post_init__(self):
        for name, kind in (
            ("td_lateral", "fpn_lateral"),
            ("bu_lateral", "fpn_lateral"),
            ("output", "fpn_output"),
        ):
            table = dict(getattr(self, name))
            missing = [lv for lv in LEVELS if lv not in table]
            if missing:
                raise ConfigError(f"FpnWeights.{name} missing levels {missing}")
            for lv, bw in table.items():
                if bw.kind != kind:
                    raise ConfigError(
                        f"FpnWeights.{name}[{lv}] must be kind {kind!r}, "
                        f"got {bw.kind!r}"
                    )
            object.__setattr__(self, name, table)


@dataclass(frozen=True)
class SemanticHeadWeights:
    dpc32: BlockWeights
    dpc16: BlockWeights
    proj32: BlockWeights
    proj16: BlockWeights
    lsfe8: BlockWeights
    lsfe4: BlockWeights
    mc16: BlockWeights  # aligns the x16 stream onto the x8 grid
    mc8: BlockWeights   # aligns the x8 stream onto the x4 grid
    classifier: LayerParams  # 1x1 conv with bias, no norm

    def __post_init__(self):
        for name, kind in (
            ("dpc32", "dpc"), ("dpc16", "dpc"),
            ("proj32", "projection"), ("proj16", "projection"),
            ("lsfe8", "lsfe"), ("lsfe4", "lsfe"),
            ("mc16", "mc"), ("mc8", "mc"),
        ):
            bw = getattr(self, name)
            if bw.kind != kind:
                raise ConfigError(
                    f"SemanticHeadWeights.{name} must be kind {kind!r}, "
                    f"got {bw.kind!r}"
                )

    @property
    def n_classes(self) -> int:
        return self.classifier.out_channels


@dataclass(frozen=True)
class SemanticPipelineWeights:
    fpn: FpnWeights
    head: SemanticHeadWeights


def _up2(t: Tensor) -> Tensor:
    return bilinear_resize(t, 2 * t.dims[2], 2 * t.dims[3])


def _down2(t: Tensor) -> Tensor:
    return bilinear_resize(t, t.dims[2] // 2, t.dims[3] // 2)


def two_way_fpn_forward(feats: EncoderFeatures, weights: FpnWeights) -> PyramidFeatures:
    """Parallel top-down and bottom-up pyramid aggregation.

    Top-down: start at x32, repeatedly 2x-upsample and add the next lateral.
    Bottom-up: start at x4, repeatedly 0.5x-downsample and add the next
    lateral. The two branch outputs are summed per level and passed through a
    3x3 separable conv with 256 channels.
    """
    lat_td = {
        lv: conv_unit(f, weights.td_lateral[lv]["lat"]) for lv, f in feats.levels()
    }
    lat_bu = {
        lv: conv_unit(f, weights.bu_lateral[lv]["lat"]) for lv, f in feats.levels()
    }

    td = {32: lat_td[32]}
    for lv in (16, 8, 4):
        td[lv] = add(lat_td[lv], _up2(td[lv * 2]))
    bu = {4: lat_bu[4]}
    for lv in (8, 16, 32):
        bu[lv] = add(lat_bu[lv], _down2(bu[lv // 2]))

    outs = {
        lv: sep_unit(add(td[lv], bu[lv]), weights.output[lv]["out"])
        for lv in LEVELS
    }
    return PyramidFeatures(outs[4], outs[8], outs[16], outs[32])


def semantic_head_features(p: PyramidFeatures, weights: SemanticHeadWeights) -> Tensor:
    """Head streams up to the 512-channel concatenation on the x4 grid."""
    s32 = conv_unit(dpc_forward(p.p32, weights.dpc32), weights.proj32["proj"])
    s16 = conv_unit(dpc_forward(p.p16, weights.dpc16), weights.proj16["proj"])
    s8 = add(lsfe_forward(p.p8, weights.lsfe8), mc_forward(s16, weights.mc16))
    s4 = add(lsfe_forward(p.p4, weights.lsfe4), mc_forward(s8, weights.mc8))
    th, tw = s4.dims[2], s4.dims[3]
    return concat_channels([
        bilinear_resize(s32, th, tw),
        bilinear_resize(s16, th, tw),
        bilinear_resize(s8, th, tw),
        s4,
    ])


def semantic_head_forward(
    p: PyramidFeatures,
    weights: SemanticHeadWeights,
    class_ids: Sequence[int],
) -> SemanticLogits:
    """Full head: concat features, classify, 4x upsample, channel softmax."""
    if len(class_ids) != weights.n_classes:
        raise ConfigError(
            f"classifier emits {weights.n_classes} channels but "
            f"{len(class_ids)} class ids were given"
        )
    cat = semantic_head_features(p, weights)
    (w,) = weights.classifier.weights
    logits = conv2d(
        cat, w, ConvSpec(kernel=(1, 1), padding=(0, 0), bias=True),
        weights.classifier.bias,
    )
    logits = bilinear_resize(logits, 4 * logits.dims[2], 4 * logits.dims[3])
    return SemanticLogits(channel_softmax(logits), tuple(class_ids))


def semantic_pipeline_forward(
    feats: EncoderFeatures,
    weights: SemanticPipelineWeights,
    class_ids: Sequence[int],
) -> SemanticLogits:
    return semantic_head_forward(
        two_way_fpn_forward(feats, weights.fpn), weights.head, class_ids
    )


# ---------------------------------------------------------------------------
# deterministic fixtures (stand-ins for a trained encoder and trained weights)


def generate_encoder_features(
    seed: int,
    input_hw: tuple[int, int],
    channels: Sequence[int] = DEFAULT_ENCODER_CHANNELS,
) -> EncoderFeatures:
    """Seeded random encoder features at the four pyramid strides."""
    rng = np.random.default_rng(seed)
    h, w = input_hw
    maps = [
        Tensor(rng.normal(0.0, 0.5, (1, c, h // lv, w // lv)).astype(np.float32))
        for lv, c in zip(LEVELS, channels)
    ]
    return EncoderFeatures(tuple(input_hw), *maps)


def _rand_conv(rng, c_out, c_in, kh, kw, scale=0.1) -> Tensor:
    return Tensor(rng.normal(0.0, scale, (c_out, c_in, kh, kw)).astype(np.float32))


def _rand_affine(rng, c):
    scale = (1.0 + rng.normal(0.0, 0.05, c)).astype(np.float32)
    shift = rng.normal(0.0, 0.05, c).astype(np.float32)
    return scale, shift


def _rand_standard(rng, c_in, c_out, kernel=(1, 1)) -> LayerParams:
    w = _rand_conv(rng, c_out, c_in, *kernel)
    scale, shift = _rand_affine(rng, c_out)
    return LayerParams((w,), scale, shift)


def _rand_separable(rng, c_in, c_out, kernel=(3, 3)) -> LayerParams:
    dw = _rand_conv(rng, c_in, 1, *kernel, scale=0.2)
    pw = _rand_conv(rng, c_out, c_in, 1, 1)
    scale, shift = _rand_affine(rng, c_out)
    return LayerParams((dw, pw), scale, shift)


def _rand_block(rng, kind: str, c_in: int) -> BlockWeights:
    if kind == "lsfe":
        return BlockWeights(kind, {
            "sep1": _rand_separable(rng, c_in, HEAD_CHANNELS),
            "sep2": _rand_separable(rng, HEAD_CHANNELS, HEAD_CHANNELS),
        })
    if kind == "mc":
        return BlockWeights(kind, {
            "sep1": _rand_separable(rng, c_in, HEAD_CHANNELS),
            "sep2": _rand_separable(rng, HEAD_CHANNELS, HEAD_CHANNELS),
        })
    if kind == "dpc":
        layers = {"stem": _rand_separable(rng, c_in, PYRAMID_CHANNELS)}
        for b in ("branch1", "branch2", "branch3", "branch4"):
            layers[b] = _rand_separable(rng, PYRAMID_CHANNELS, PYRAMID_CHANNELS)
        layers["project"] = _rand_standard(rng, 5 * PYRAMID_CHANNELS, PYRAMID_CHANNELS)
        return BlockWeights(kind, layers)
    if kind == "fpn_lateral":
        return BlockWeights(kind, {"lat": _rand_standard(rng, c_in, PYRAMID_CHANNELS)})
    if kind == "fpn_output":
        return BlockWeights(kind, {
            "out": _rand_separable(rng, PYRAMID_CHANNELS, PYRAMID_CHANNELS)
        })
    if kind == "projection":
        return BlockWeights(kind, {"proj": _rand_standard(rng, c_in, HEAD_CHANNELS)})
    raise ConfigError(f"unknown block kind {kind!r}")


def make_fpn_weights(
    seed: int, encoder_channels: Sequence[int] = DEFAULT_ENCODER_CHANNELS
) -> FpnWeights:
    rng = np.random.default_rng(seed)
    td = {lv: _rand_block(rng, "fpn_lateral", c)
          for lv, c in zip(LEVELS, encoder_channels)}
    bu = {lv: _rand_block(rng, "fpn_lateral", c)
          for lv, c in zip(LEVELS, encoder_channels)}
    out = {lv: _rand_block(rng, "fpn_output", PYRAMID_CHANNELS) for lv in LEVELS}
    return FpnWeights(td, bu, out)


def make_head_weights(seed: int, n_classes: int) -> SemanticHeadWeights:
    rng = np.random.default_rng(seed)
    classifier = LayerParams(
        (_rand_conv(rng, n_classes, 4 * HEAD_CHANNELS, 1, 1),),
        bias=np.zeros(n_classes, dtype=np.float32),
    )
    return SemanticHeadWeights(
        dpc32=_rand_block(rng, "dpc", PYRAMID_CHANNELS),
        dpc16=_rand_block(rng, "dpc", PYRAMID_CHANNELS),
        proj32=_rand_block(rng, "projection", PYRAMID_CHANNELS),
        proj16=_rand_block(rng, "projection", PYRAMID_CHANNELS),
        lsfe8=_rand_block(rng, "lsfe", PYRAMID_CHANNELS),
        lsfe4=_rand_block(rng, "lsfe", PYRAMID_CHANNELS),
        mc16=_rand_block(rng, "mc", HEAD_CHANNELS),
        mc8=_rand_block(rng, "mc", HEAD_CHANNELS),
        classifier=classifier,
    )


def make_pipeline_weights(
    seed: int,
    encoder_channels: Sequence[int] = DEFAULT_ENCODER_CHANNELS,
    n_classes: int = 19,
) -> SemanticPipelineWeights:
    return SemanticPipelineWeights(
        fpn=make_fpn_weights(seed, encoder_channels),
        head=make_head_weights(seed + 1, n_classes),
    )


# ---------------------------------------------------------------------------
# weight bundle I/O: a directory of PTSR files plus a manifest
#
# manifest.txt lines:  tensor <name> <relative-path>
# Affine vectors and biases are stored as (1, C, 1, 1) tensors.


def _flatten_block(prefix: str, bw: BlockWeights) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for layer_id, p in bw.layers.items():
        base = f"{prefix}.{layer_id}"
        if p.separable:
            out[f"{base}.dw"], out[f"{base}.pw"] = p.weights
        else:
            out[f"{base}.w"] = p.weights[0]
        for field_name in ("scale", "shift", "bias"):
            arr = getattr(p, field_name)
            if arr is not None:
                out[f"{base}.{field_name}"] = Tensor(
                    np.asarray(arr, dtype=np.float32).reshape(1, -1, 1, 1)
                )
    return out


class _OneLayerView:
    """Adapter so the classifier LayerParams flattens like a one-layer block."""

    def __init__(self, classifier: LayerParams):
        self.layers = {"clf": classifier}


def _flatten_weights(weights: SemanticPipelineWeights) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for lv in LEVELS:
        out.update(_flatten_block(f"fpn.td_lat.{lv}", weights.fpn.td_lateral[lv]))
        out.update(_flatten_block(f"fpn.bu_lat.{lv}", weights.fpn.bu_lateral[lv]))
        out.update(_flatten_block(f"fpn.out.{lv}", weights.fpn.output[lv]))
    head = weights.head
    for name in ("dpc32", "dpc16", "proj32", "proj16",
                 "lsfe8", "lsfe4", "mc16", "mc8"):
        out.update(_flatten_block(f"head.{name}", getattr(head, name)))
    out.update(_flatten_block("head.classifier", _OneLayerView(head.classifier)))
    return out


def save_weight_bundle(weights: SemanticPipelineWeights, directory) -> list[Path]:
    """Write every parameter tensor as PTSR plus a manifest; returns paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat = _flatten_weights(weights)
    lines = []
    written = []
    for name in sorted(flat):
        rel = name.replace(".", "_") + ".ptsr"
        write_ptsr(directory / rel, flat[name])
        lines.append(f"tensor {name} {rel}")
        written.append(directory / rel)
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return [manifest] + written


def _read_bundle_tensors(directory) -> dict[str, Tensor]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError("weight bundle has no manifest.txt", path=manifest)
    tensors: dict[str, Tensor] = {}
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "tensor":
            raise FormatError(
                f"expected 'tensor <name> <path>', got {line!r}",
                path=manifest, line=lineno,
            )
        _, name, rel = parts
        target = directory / rel
        if not target.exists():
            raise FormatError(f"missing tensor file {target}", path=manifest,
                              line=lineno)
        tensors[name] = read_ptsr(target)
    return tensors


def _vector(tensors: dict[str, Tensor], name: str) -> np.ndarray | None:
    t = tensors.get(name)
    return None if t is None else t.data.reshape(-1)


def _layer_from(tensors: dict[str, Tensor], base: str) -> LayerParams:
    if f"{base}.dw" in tensors:
        weights = (tensors[f"{base}.dw"], tensors[f"{base}.pw"])
    elif f"{base}.w" in tensors:
        weights = (tensors[f"{base}.w"],)
    else:
        raise FormatError(f"bundle is missing weights for layer {base!r}")
    return LayerParams(
        weights,
        _vector(tensors, f"{base}.scale"),
        _vector(tensors, f"{base}.shift"),
        _vector(tensors, f"{base}.bias"),
    )


def _block_from(tensors, prefix: str, kind: str) -> BlockWeights:
    layers = {
        layer_id: _layer_from(tensors, f"{prefix}.{layer_id}")
        for layer_id in REQUIRED_LAYERS[kind]
    }
    return BlockWeights(kind, layers)


def load_weight_bundle(directory) -> SemanticPipelineWeights:
    """Reconstruct pipeline weights from a bundle directory."""
    tensors = _read_bundle_tensors(directory)
    td = {lv: _block_from(tensors, f"fpn.td_lat.{lv}", "fpn_lateral")
          for lv in LEVELS}
    bu = {lv: _block_from(tensors, f"fpn.bu_lat.{lv}", "fpn_lateral")
          for lv in LEVELS}
    out = {lv: _block_from(tensors, f"fpn.out.{lv}", "fpn_output") for lv in LEVELS}
    head = SemanticHeadWeights(
        dpc32=_block_from(tensors, "head.dpc32", "dpc"),
        dpc16=_block_from(tensors, "head.dpc16", "dpc"),
        proj32=_block_from(tensors, "head.proj32", "projection"),
        proj16=_block_from(tensors, "head.proj16", "projection"),
        lsfe8=_block_from(tensors, "head.lsfe8", "lsfe"),
        lsfe4=_block_from(tensors, "head.lsfe4", "lsfe"),
        mc16=_block_from(tensors, "head.mc16", "mc"),
        mc8=_block_from(tensors, "head.mc8", "mc"),
        classifier=_layer_from(tensors, "head.classifier.clf"),
    )
    return SemanticPipelineWeights(FpnWeights(td, bu, out), head)


def read_encoder_features(directory) -> EncoderFeatures:
    """Read f4/f8/f16/f32 PTSR files; input resolution is f4 dims x 4."""
    directory = Path(directory)
    maps = []
    for lv in LEVELS:
        target = directory / f"f{lv}.ptsr"
        if not target.exists():
            raise FormatError(f"missing encoder feature file {target}", path=target)
        maps.append(read_ptsr(target))
    h, w = maps[0].dims[2] * 4, maps[0].dims[3] * 4
    return EncoderFeatures((h, w), *maps)


def write_encoder_features(feats: EncoderFeatures, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for lv, t in feats.levels():
        p = directory / f"f{lv}.ptsr"
        write_ptsr(p, t)
        written.append(p)
    return written
