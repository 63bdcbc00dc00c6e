"""Rank-4 tensor kernels: convolution, resizing, activations, affine norm.

Every kernel is a pure function over immutable :class:`Tensor` values laid out
as ``(batch, channels, height, width)``, row-major with width fastest. Stored
values are float32; convolution and interpolation arithmetic runs in float64
before the final cast, with a fixed reduction order, so results are
reproducible bit-for-bit across runs.

The module also owns the PTSR tensor container format::

    magic   4 bytes  b"PTSR"
    version u8       1
    dims    4 x u32  little-endian (batch, channels, height, width)
    data    f32[]    little-endian, row-major, exactly prod(dims) values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

__all__ = [
    "Tensor",
    "ConvSpec",
    "conv2d",
    "depthwise_separable_conv",
    "bilinear_resize",
    "leaky_relu",
    "sigmoid",
    "channel_softmax",
    "activate",
    "affine_norm",
    "add",
    "concat_channels",
    "read_ptsr",
    "write_ptsr",
    "PTSR_MAGIC",
    "PTSR_VERSION",
]

PTSR_MAGIC = b"PTSR"
PTSR_VERSION = 1
_PTSR_HEADER = struct.Struct("<4sB4I")


@dataclass(frozen=True)
class Tensor:
    """Immutable float32 array with dims (batch, channels, height, width).

    Construction validates rank, positive dims, and finiteness (NaN/Inf are
    rejected), then freezes the buffer. Because every kernel returns a fresh
    Tensor, the finiteness check doubles as a post-kernel assertion.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ShapeError("tensor must have exactly 4 dims", actual=arr.shape)
        if any(d < 1 for d in arr.shape):
            raise ShapeError("tensor dims must all be >= 1", actual=arr.shape)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor contains NaN or Inf values")
        if arr is self.data:
            arr = arr.copy()  # never freeze a caller-owned buffer
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(dims), dtype=np.float32))


@dataclass(frozen=True)
class ConvSpec:
    """Convolution hyper-parameters.

    ``padding`` is either the string ``"same-zero"`` (zero padding chosen so a
    stride-1 convolution preserves spatial dims; asymmetric extents pad more on
    the bottom/right) or an explicit symmetric ``(pad_h, pad_w)`` pair.
    ``bias`` declares whether the layer carries a bias vector; ``conv2d``
    enforces that the flag and the argument agree.
    """

    kernel: tuple[int, int]
    stride: int = 1
    dilation: tuple[int, int] = (1, 1)
    padding: str | tuple[int, int] = "same-zero"
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        dh, dw = self.dilation
        if kh < 1 or kw < 1:
            raise ConfigError(f"kernel dims must be >= 1, got {self.kernel}")
        if dh < 1 or dw < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if isinstance(self.padding, str):
            if self.padding != "same-zero":
                raise ConfigError(f"unknown padding mode {self.padding!r}")
        else:
            ph, pw = self.padding
            if ph < 0 or pw < 0:
                raise ConfigError(f"padding must be >= 0, got {self.padding}")

    def effective_kernel(self) -> tuple[int, int]:
        kh, kw = self.kernel
        dh, dw = self.dilation
        return (kh - 1) * dh + 1, (kw - 1) * dw + 1


def _pad_amounts(spec: ConvSpec) -> tuple[int, int, int, int]:
    ekh, ekw = spec.effective_kernel()
    if spec.padding == "same-zero":
        th, tw = ekh - 1, ekw - 1
        return th // 2, th - th // 2, tw // 2, tw - tw // 2
    ph, pw = spec.padding
    return ph, ph, pw, pw


def conv2d(
    input: Tensor,
    weights: Tensor,
    spec: ConvSpec,
    bias: np.ndarray | None = None,
) -> Tensor:
    """2-D convolution (cross-correlation) over NCHW input.

    ``weights`` has dims (out_channels, in_channels // groups, kh, kw).
    Products are accumulated in float64 per output element in a fixed order
    and the result is cast to float32.
    """
    n, c_in, h, w = input.dims
    c_out, cpg, kh, kw = weights.dims
    if (kh, kw) != tuple(spec.kernel):
        raise ShapeError(
            "weight kernel does not match spec kernel",
            expected=spec.kernel,
            actual=(kh, kw),
        )
    g = spec.groups
    if c_in % g != 0 or c_out % g != 0:
        raise ShapeError(
            f"groups={g} must divide both channel counts",
            actual=(c_in, c_out),
        )
    if cpg != c_in // g:
        raise ShapeError(
            "weights dims inconsistent with input channels and groups",
            expected=(c_out, c_in // g, kh, kw),
            actual=weights.dims,
        )
    if spec.bias != (bias is not None):
        raise ConfigError(
            f"spec.bias={spec.bias} but bias argument was "
            + ("provided" if bias is not None else "omitted")
        )
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != c_out:
            raise ShapeError(
                "bias length must equal out_channels",
                expected=(c_out,),
                actual=bias.shape,
            )

    ekh, ekw = spec.effective_kernel()
    pt, pb, pl, pr = _pad_amounts(spec)
    out_h = (h + pt + pb - ekh) // spec.stride + 1
    out_w = (w + pl + pr - ekw) // spec.stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            "effective kernel exceeds padded input",
            expected=(ekh, ekw),
            actual=(h + pt + pb, w + pl + pr),
        )

    x = np.pad(input.data.astype(np.float64), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    dh, dw = spec.dilation
    rows = (np.arange(out_h) * spec.stride)[:, None] + np.arange(kh)[None, :] * dh
    cols = (np.arange(out_w) * spec.stride)[:, None] + np.arange(kw)[None, :] * dw
    # patches: (n, c_in, out_h, out_w, kh, kw)
    patches = x[:, :, rows[:, None, :, None], cols[None, :, None, :]]
    wt = weights.data.astype(np.float64)

    if g == 1:
        out = np.einsum("nchwkl,ockl->nohw", patches, wt)
    elif g == c_in and c_out == c_in:
        # depthwise fast path (channel multiplier 1)
        out = np.einsum("nchwkl,ckl->nchw", patches, wt[:, 0])
    else:
        opg = c_out // g
        out = np.empty((n, c_out, out_h, out_w), dtype=np.float64)
        for gi in range(g):
            ci = slice(gi * cpg, (gi + 1) * cpg)
            co = slice(gi * opg, (gi + 1) * opg)
            out[:, co] = np.einsum("nchwkl,ockl->nohw", patches[:, ci], wt[co])
    if bias is not None:
        out += bias[:, None, None]
    return Tensor(out.astype(np.float32))


def depthwise_separable_conv(
    input: Tensor,
    dw_weights: Tensor,
    pw_weights: Tensor,
    spec: ConvSpec,
    dw_bias: np.ndarray | None = None,
    pw_bias: np.ndarray | None = None,
) -> Tensor:
    """Depthwise conv under ``spec`` followed by a 1x1 pointwise conv.

    Equals ``conv2d(conv2d(input, dw), pw)`` by construction: the depthwise
    stage runs with groups == in_channels and carries the spatial parameters;
    the pointwise stage is a plain 1x1, stride 1, no padding.
    """
    c_in = input.dims[1]
    if dw_weights.dims[0] != c_in or dw_weights.dims[1] != 1:
        raise ShapeError(
            "depthwise weights must have dims (in_channels, 1, kh, kw)",
            expected=(c_in, 1) + tuple(spec.kernel),
            actual=dw_weights.dims,
        )
    if pw_weights.dims[1] != c_in or pw_weights.dims[2:] != (1, 1):
        raise ShapeError(
            "pointwise weights must have dims (out_channels, in_channels, 1, 1)",
            expected=(pw_weights.dims[0], c_in, 1, 1),
            actual=pw_weights.dims,
        )
    dw_spec = replace(spec, groups=c_in, bias=dw_bias is not None)
    mid = conv2d(input, dw_weights, dw_spec, dw_bias)
    pw_spec = ConvSpec(
        kernel=(1, 1), stride=1, dilation=(1, 1), padding=(0, 0),
        groups=1, bias=pw_bias is not None,
    )
    return conv2d(mid, pw_weights, pw_spec, pw_bias)


def _sample_axis(in_size: int, out_size: int):
    """Half-pixel-center source coordinates with edge clamping."""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    base = np.floor(src)
    frac = src - base
    lo = np.clip(base, 0, in_size - 1).astype(np.intp)
    hi = np.clip(base + 1, 0, in_size - 1).astype(np.intp)
    return lo, hi, frac


def bilinear_resize(input: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel source centers and edge clamping.

    Source coordinate for output index x is ``(x + 0.5) * in/out - 0.5``.
    Interpolation uses the ``v0 + f * (v1 - v0)`` form, so constant inputs are
    preserved exactly; resizing to the identical size returns the input
    bit-for-bit.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError("output dims must be >= 1", actual=(out_h, out_w))
    n, c, h, w = input.dims
    if (out_h, out_w) == (h, w):
        return Tensor(input.data)
    x = input.data.astype(np.float64)
    r0, r1, fy = _sample_axis(h, out_h)
    c0, c1, fx = _sample_axis(w, out_w)
    v00 = x[:, :, r0[:, None], c0[None, :]]
    v01 = x[:, :, r0[:, None], c1[None, :]]
    v10 = x[:, :, r1[:, None], c0[None, :]]
    v11 = x[:, :, r1[:, None], c1[None, :]]
    fx = fx[None, None, None, :]
    fy = fy[None, None, :, None]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    out = top + fy * (bottom - top)
    return Tensor(out.astype(np.float32))


def leaky_relu(input: Tensor, slope: float = 0.01) -> Tensor:
    """x for x >= 0 else slope * x."""
    x = input.data.astype(np.float64)
    return Tensor(np.where(x >= 0.0, x, slope * x).astype(np.float32))


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    # clip keeps exp() finite; sigmoid saturates long before +-500 anyway
    z = np.clip(x.astype(np.float64), -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(-z))


def sigmoid(input: Tensor) -> Tensor:
    """Elementwise logistic function, computed in float64."""
    return Tensor(_sigmoid64(input.data).astype(np.float32))


def channel_softmax(input: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis (max-shifted for stability)."""
    x = input.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return Tensor((e / e.sum(axis=1, keepdims=True)).astype(np.float32))


def activate(input: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    """Dispatch on activation name: leaky_relu | sigmoid | channel_softmax."""
    if kind == "leaky_relu":
        return leaky_relu(input, slope)
    if kind == "sigmoid":
        return sigmoid(input)
    if kind == "channel_softmax":
        return channel_softmax(input)
    raise DataError(f"unknown activation kind {kind!r}")


def affine_norm(input: Tensor, scale, shift) -> Tensor:
    """Per-channel ``x * scale[c] + shift[c]`` (a folded inference-mode norm)."""
    c = input.dims[1]
    scale = np.asarray(scale, dtype=np.float64).reshape(-1)
    shift = np.asarray(shift, dtype=np.float64).reshape(-1)
    if scale.shape[0] != c or shift.shape[0] != c:
        raise ShapeError(
            "scale/shift length must equal channel count",
            expected=(c,),
            actual=(scale.shape[0], shift.shape[0]),
        )
    out = input.data.astype(np.float64) * scale[None, :, None, None]
    out += shift[None, :, None, None]
    return Tensor(out.astype(np.float32))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-dims tensors."""
    if a.dims != b.dims:
        raise ShapeError("add requires identical dims", expected=a.dims, actual=b.dims)
    return Tensor(a.data + b.data)


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    ts = list(tensors)
    if not ts:
        raise DataError("concat_channels needs at least one tensor")
    first = ts[0].dims
    for t in ts[1:]:
        if (t.dims[0],) + t.dims[2:] != (first[0],) + first[2:]:
            raise ShapeError(
                "concat_channels requires matching batch and spatial dims",
                expected=first,
                actual=t.dims,
            )
    return Tensor(np.concatenate([t.data for t in ts], axis=1))


def write_ptsr(path, tensor: Tensor) -> None:
    """Serialize a tensor to the PTSR container (see module docstring)."""
    header = _PTSR_HEADER.pack(PTSR_MAGIC, PTSR_VERSION, *tensor.dims)
    payload = tensor.data.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_ptsr(path) -> Tensor:
    """Parse a PTSR file; malformed headers or truncated data raise FormatError."""
    raw = Path(path).read_bytes()
    if len(raw) < _PTSR_HEADER.size:
        raise FormatError("file too short for PTSR header", path=path)
    magic, version, n, c, h, w = _PTSR_HEADER.unpack_from(raw)
    if magic != PTSR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PTSR_MAGIC!r}", path=path)
    if version != PTSR_VERSION:
        raise FormatError(f"unsupported PTSR version {version}", path=path)
    dims = (n, c, h, w)
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dims {dims}", path=path)
    count = n * c * h * w
    expected = _PTSR_HEADER.size + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"payload length {len(raw) - _PTSR_HEADER.size} does not match "
            f"dims {dims} ({4 * count} bytes expected)",
            path=path,
        )
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=_PTSR_HEADER.size)
    try:
        return Tensor(values.reshape(dims))
    except DataError as exc:
        raise FormatError(str(exc), path=path) from exc
