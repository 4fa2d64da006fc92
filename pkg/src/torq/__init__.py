"""Two-level orthogonal rotation for 4-bit microscaling quantization.

An inter-block rotation equalizes the energy of the blocks that share a
scale, and an intra-block rotation spreads normalized values evenly over
the 4-bit codebook. Both are calibrated offline from a few samples and can
be folded into the next layer's weights.
"""

from .blocks import BlockShape, BlockTensor, estimate_covariances, reshape_tokens
from .errors import (
    ConvergenceError,
    FormatError,
    InvalidInput,
    InvalidScale,
    NoTransferPossible,
    ShapeError,
    TorqError,
)
from .formats import MXFP4, MXINT4, NVFP4, MxFormat, default_scale, get_format, project_nearest, quantize_block
from .inter import AngleMode, EqualizationConfig, build_inter_rotation
from .intra import IntraConfig, ScaleVector, build_intra_rotation, code_loss
from .metrics import CalibReport, build_report, emit_report, quantization_mse, variance_spread
from .pipeline import (
    RotationBundle,
    ablation_bundles,
    calibrate,
    explicit_inverse,
    forward_quantize,
    fuse_weights,
    rtn_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "BlockShape",
    "BlockTensor",
    "estimate_covariances",
    "reshape_tokens",
    "ConvergenceError",
    "FormatError",
    "InvalidInput",
    "InvalidScale",
    "NoTransferPossible",
    "ShapeError",
    "TorqError",
    "MXFP4",
    "MXINT4",
    "NVFP4",
    "MxFormat",
    "default_scale",
    "get_format",
    "project_nearest",
    "quantize_block",
    "AngleMode",
    "EqualizationConfig",
    "build_inter_rotation",
    "IntraConfig",
    "ScaleVector",
    "build_intra_rotation",
    "code_loss",
    "CalibReport",
    "build_report",
    "emit_report",
    "quantization_mse",
    "variance_spread",
    "RotationBundle",
    "ablation_bundles",
    "calibrate",
    "explicit_inverse",
    "forward_quantize",
    "fuse_weights",
    "rtn_baseline",
]
