"""Numerics toolkit for panoptic segmentation pipelines.

Pure-numpy reference implementations of the pieces that sit between an
encoder and a panoptic image: deterministic conv/resize kernels, a two-way
feature pyramid with a dense-prediction semantic head, logit fusion and
canvas assembly, training losses, PQ/SQ/RQ/mIoU metrics, and the file
formats that tie them together.
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateBoxError,
    FormatError,
    InvariantError,
    ShapeError,
    ToolkitError,
)
from .fusion import assemble_baseline, assemble_panoptic, fuse_adaptive, fuse_alternative
from .instances import FusionConfig, InstancePrediction
from .metrics import compute_miou, compute_pq, match_segments
from .panio import (
    ClassConfig,
    ClassDef,
    PanopticMap,
    default_class_config,
    load_class_config,
    read_panoptic_png,
    write_panoptic_png,
)
from .tensor import ConvSpec, Tensor, bilinear_resize, conv2d, read_ptsr, write_ptsr

__version__ = "0.1.0"

__all__ = [
    "ClassConfig",
    "ClassDef",
    "ConfigError",
    "ConvSpec",
    "DataError",
    "DegenerateBoxError",
    "FormatError",
    "FusionConfig",
    "InstancePrediction",
    "InvariantError",
    "PanopticMap",
    "ShapeError",
    "Tensor",
    "ToolkitError",
    "__version__",
    "assemble_baseline",
    "assemble_panoptic",
    "bilinear_resize",
    "compute_miou",
    "compute_pq",
    "conv2d",
    "default_class_config",
    "fuse_adaptive",
    "fuse_alternative",
    "load_class_config",
    "match_segments",
    "read_panoptic_png",
    "read_ptsr",
    "write_panoptic_png",
    "write_ptsr",
]
