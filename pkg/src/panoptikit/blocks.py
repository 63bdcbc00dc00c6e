"""Reusable convolutional blocks and parameter accounting.

Blocks are pure forward functions over :class:`BlockWeights`. Every
convolution in a block is followed by a per-channel affine norm and a leaky
ReLU (slope 0.01); a block forward is therefore an explicit composition of the
tensor-module primitives and nothing else.

Block kinds and their required layer ids:

==============  =======================================================
kind            layers
==============  =======================================================
lsfe            sep1, sep2          (3x3 separable, 128 out each)
dpc             stem, branch1..4, project
mc              sep1, sep2          (3x3 separable, 128 out each)
fpn_lateral     lat                 (1x1 standard conv, 256 out)
fpn_output      out                 (3x3 separable, 256 out)
projection      proj                (1x1 standard conv)
==============  =======================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import (
    ConvSpec,
    Tensor,
    affine_norm,
    concat_channels,
    conv2d,
    depthwise_separable_conv,
    leaky_relu,
    bilinear_resize,
)

__all__ = [
    "LayerParams",
    "BlockWeights",
    "REQUIRED_LAYERS",
    "DPC_DILATIONS",
    "lsfe_forward",
    "dpc_branches",
    "dpc_forward",
    "mc_forward",
    "conv_unit",
    "sep_unit",
    "LayerSpec",
    "LayerCount",
    "ParamCountReport",
    "count_params",
    "standard_equivalent_total",
    "parse_layer_file",
]

LEAKY_SLOPE = 0.01

REQUIRED_LAYERS: dict[str, tuple[str, ...]] = {
    "lsfe": ("sep1", "sep2"),
    "dpc": ("stem", "branch1", "branch2", "branch3", "branch4", "project"),
    "mc": ("sep1", "sep2"),
    "fpn_lateral": ("lat",),
    "fpn_output": ("out",),
    "projection": ("proj",),
}

# dilation rates of the dense prediction cell, keyed by layer id
DPC_DILATIONS: dict[str, tuple[int, int]] = {
    "stem": (1, 6),
    "branch1": (1, 1),
    "branch2": (6, 21),
    "branch3": (18, 15),
    "branch4": (6, 3),
}


@dataclass(frozen=True)
class LayerParams:
    """Weights for one conv + affine unit.

    ``weights`` holds one tensor for a standard convolution or
    ``(depthwise, pointwise)`` for a separable one. ``scale``/``shift`` are
    the per-output-channel affine parameters; both ``None`` means the layer
    has no norm (e.g. a final classifier). ``bias`` is an optional conv bias.
    """

    weights: tuple[Tensor, ...]
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) not in (1, 2):
            raise ConfigError(
                f"LayerParams takes 1 (standard) or 2 (separable) weight "
                f"tensors, got {len(self.weights)}"
            )
        out = self.out_channels
        for name in ("scale", "shift", "bias"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float32).reshape(-1).copy()
            if arr.shape[0] != out:
                raise ShapeError(
                    f"{name} length must equal out_channels",
                    expected=(out,),
                    actual=arr.shape,
                )
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if (self.scale is None) != (self.shift is None):
            raise ConfigError("scale and shift must be provided together")

    @property
    def separable(self) -> bool:
        return len(self.weights) == 2

    @property
    def out_channels(self) -> int:
        return self.weights[-1].dims[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights[0].dims[2:]


@dataclass(frozen=True)
class BlockWeights:
    """A block kind tag plus its named layers."""

    kind: str
    layers: Mapping[str, LayerParams]

    def __post_init__(self):
        if self.kind not in REQUIRED_LAYERS:
            raise ConfigError(
                f"unknown block kind {self.kind!r}; "
                f"expected one of {sorted(REQUIRED_LAYERS)}"
            )
        missing = [k for k in REQUIRED_LAYERS[self.kind] if k not in self.layers]
        if missing:
            raise ConfigError(
                f"block kind {self.kind!r} is missing layers {missing}"
            )
        object.__setattr__(self, "layers", dict(self.layers))

    def __getitem__(self, layer_id: str) -> LayerParams:
        return self.layers[layer_id]


def conv_unit(x: Tensor, params: LayerParams, kernel=(1, 1), dilation=(1, 1)) -> Tensor:
    """Standard conv -> affine -> leaky ReLU (norm/activation skipped if absent)."""
    (w,) = params.weights
    spec = ConvSpec(
        kernel=kernel, dilation=dilation, padding="same-zero",
        bias=params.bias is not None,
    )
    y = conv2d(x, w, spec, params.bias)
    if params.scale is None:
        return y
    return leaky_relu(affine_norm(y, params.scale, params.shift), LEAKY_SLOPE)


def sep_unit(x: Tensor, params: LayerParams, dilation=(1, 1)) -> Tensor:
    """Separable conv -> affine -> leaky ReLU."""
    dw, pw = params.weights
    spec = ConvSpec(kernel=dw.dims[2:], dilation=dilation, padding="same-zero")
    y = depthwise_separable_conv(x, dw, pw, spec, pw_bias=params.bias)
    if params.scale is None:
        return y
    return leaky_relu(affine_norm(y, params.scale, params.shift), LEAKY_SLOPE)


def _expect_kind(weights: BlockWeights, kind: str) -> None:
    if weights.kind != kind:
        raise ConfigError(f"expected block kind {kind!r}, got {weights.kind!r}")


def lsfe_forward(x: Tensor, weights: BlockWeights) -> Tensor:
    """Large-scale feature extractor: two 3x3 separable convs, 128 channels."""
    _expect_kind(weights, "lsfe")
    y = sep_unit(x, weights["sep1"])
    return sep_unit(y, weights["sep2"])


def dpc_branches(x: Tensor, weights: BlockWeights) -> Tensor:
    """Dense prediction cell up to (and including) the branch concatenation.

    The stem is a 3x3 separable conv with dilation (1, 6); three parallel
    branches with dilations (1, 1), (6, 21), (18, 15) consume the stem, and a
    fourth with dilation (6, 3) consumes the (18, 15) branch. The stem output
    itself is the fifth concatenated stream, giving 5 x 256 = 1280 channels in
    the order stem, (1,1), (6,21), (18,15), (6,3).
    """
    _expect_kind(weights, "dpc")
    stem = sep_unit(x, weights["stem"], DPC_DILATIONS["stem"])
    b1 = sep_unit(stem, weights["branch1"], DPC_DILATIONS["branch1"])
    b2 = sep_unit(stem, weights["branch2"], DPC_DILATIONS["branch2"])
    b3 = sep_unit(stem, weights["branch3"], DPC_DILATIONS["branch3"])
    b4 = sep_unit(b3, weights["branch4"], DPC_DILATIONS["branch4"])
    return concat_channels([stem, b1, b2, b3, b4])


def dpc_forward(x: Tensor, weights: BlockWeights) -> Tensor:
    """Dense prediction cell: branch concat followed by a 1x1 back to 256."""
    cat = dpc_branches(x, weights)
    return conv_unit(cat, weights["project"], kernel=(1, 1))


def mc_forward(x: Tensor, weights: BlockWeights) -> Tensor:
    """Mismatch-correction module: two 3x3 separable convs then 2x upsample."""
    _expect_kind(weights, "mc")
    y = sep_unit(x, weights["sep1"])
    y = sep_unit(y, weights["sep2"])
    _, _, h, w = y.dims
    return bilinear_resize(y, 2 * h, 2 * w)


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass(frozen=True)
class LayerSpec:
    """One line of a layer description file."""

    name: str
    kind: str  # "standard" | "separable"
    kernel: tuple[int, int]
    in_channels: int
    out_channels: int
    bias: bool = False
    norm: bool = False

    def __post_init__(self):
        if self.kind not in ("standard", "separable"):
            raise ConfigError(
                f"unknown layer kind {self.kind!r} for layer {self.name!r}; "
                "expected 'standard' or 'separable'"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"layer {self.name!r}: channel counts must be >= 1")
        if self.kernel[0] < 1 or self.kernel[1] < 1:
            raise ConfigError(f"layer {self.name!r}: kernel dims must be >= 1")

    def param_count(self) -> int:
        kh, kw = self.kernel
        if self.kind == "standard":
            n = kh * kw * self.in_channels * self.out_channels
        else:
            n = kh * kw * self.in_channels + self.in_channels * self.out_channels
        return n + (self.out_channels if self.bias else 0)

    def standard_equivalent(self) -> int:
        """Parameters of a standard conv with the same shape contract."""
        kh, kw = self.kernel
        return kh * kw * self.in_channels * self.out_channels + (
            self.out_channels if self.bias else 0
        )

    def affine_count(self) -> int:
        return 2 * self.out_channels if self.norm else 0


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: str
    params: int
    affine_params: int


@dataclass(frozen=True)
class ParamCountReport:
    """Convolution parameters per layer, totals, and affine params (separate)."""

    layers: tuple[LayerCount, ...]
    total: int
    by_kind: dict[str, int] = field(default_factory=dict)
    affine_total: int = 0


def count_params(layers: Sequence[LayerSpec]) -> ParamCountReport:
    """Count conv weights/biases; affine scale+shift reported separately.

    standard: kh*kw*c_in*c_out (+c_out bias);
    separable: kh*kw*c_in + c_in*c_out (+c_out bias).
    Counting is additive over layers and independent of their order.
    """
    counts = []
    by_kind = {"standard": 0, "separable": 0}
    total = 0
    affine = 0
    for layer in layers:
        n = layer.param_count()
        a = layer.affine_count()
        counts.append(LayerCount(layer.name, layer.kind, n, a))
        by_kind[layer.kind] += n
        total += n
        affine += a
    return ParamCountReport(tuple(counts), total, by_kind, affine)


def standard_equivalent_total(layers: Sequence[LayerSpec]) -> int:
    """Total if every layer were a standard convolution of the same shape."""
    return sum(layer.standard_equivalent() for layer in layers)


_BOOL_WORDS = {"yes": True, "no": False, "true": True, "false": False}


def _parse_kernel(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"kernel must look like '3x3', got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL_WORDS[text.lower()]
    except KeyError:
        raise ValueError(f"expected yes/no, got {text!r}") from None


def parse_layer_file(path) -> list[LayerSpec]:
    """Parse a layer description file.

    One layer per line::

        layer name=conv1 kind=separable kernel=3x3 in=256 out=256 bias=no norm=yes

    Blank lines and ``#`` comments are ignored. Errors carry the path and the
    1-based line number.
    """
    path = Path(path)
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] != "layer":
            raise FormatError(
                f"expected line to start with 'layer', got {tokens[0]!r}",
                path=path, line=lineno,
            )
        fields: dict[str, str] = {}
        for token in tokens[1:]:
            if "=" not in token:
                raise FormatError(
                    f"expected key=value, got {token!r}", path=path, line=lineno
                )
            key, value = token.split("=", 1)
            if key in fields:
                raise FormatError(f"duplicate key {key!r}", path=path, line=lineno)
            fields[key] = value
        try:
            name = fields.pop("name")
            kind = fields.pop("kind")
            kernel = _parse_kernel(fields.pop("kernel"))
            cin = int(fields.pop("in"))
            cout = int(fields.pop("out"))
            bias = _parse_bool(fields.pop("bias", "no"))
            norm = _parse_bool(fields.pop("norm", "no"))
        except KeyError as exc:
            raise FormatError(f"missing field {exc}", path=path, line=lineno) from exc
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        if fields:
            raise FormatError(
                f"unknown fields {sorted(fields)}", path=path, line=lineno
            )
        try:
            layers.append(
                LayerSpec(name, kind, kernel, cin, cout, bias=bias, norm=norm)
            )
        except ConfigError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
    return layers
