"""Microscaling 4-bit block formats and their scalar/block quantizers.

Three formats are provided:

- ``mxfp4``: OCP MXFP4 (e2m1 elements, power-of-two shared scale).
- ``mxint4``: sign + 3-bit fixed point elements with two fractional bits,
  i.e. magnitudes ``k/4`` for ``k = 0..7``, power-of-two shared scale.
- ``nvfp4``: e2m1 elements with a real-valued per-block scale ``max/6``.
  The FP8 encoding of that scale is not modelled.

Magnitudes live in a normalized space (block value divided by its scale).
Each magnitude falls into one of ``J`` bins delimited by the midpoints
between consecutive codewords. A value lying exactly on a boundary goes to
the smaller-magnitude codeword, and magnitudes above the largest codeword
saturate to it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, InvalidScale

__all__ = [
    "FormatName",
    "ScaleRule",
    "MxFormat",
    "QuantizedBlock",
    "MXFP4",
    "MXINT4",
    "NVFP4",
    "get_format",
    "default_scale",
    "block_scales",
    "pow2_round",
    "pow2_floor",
    "bin_index",
    "project_nearest",
    "quantize_block",
    "quantize_rows",
    "occupancy_histogram",
]


class FormatName(str, enum.Enum):
    MXFP4_E2M1 = "mxfp4"
    MXINT4 = "mxint4"
    NVFP4_E2M1 = "nvfp4"


class ScaleRule(str, enum.Enum):
    POW2_FLOOR_OF_MAX = "pow2_floor_of_max"
    OPTIMIZED = "optimized"


@dataclass(frozen=True)
class MxFormat:
    """A microscaling element format.

    ``codewords`` holds the ``J`` nonnegative magnitudes in increasing order
    and ``boundaries`` the ``J - 1`` decision thresholds between them.
    ``e_min``/``e_max`` delimit the log2-magnitude range ``[e_min,
    e_max + log2 1.5]`` used by the error-bound diagnostics.
    """

    name: FormatName
    codewords: np.ndarray
    scale_rule: ScaleRule
    e_min: float
    e_max: float
    boundaries: np.ndarray = field(init=False)

    def __post_init__(self):
        cw = np.asarray(self.codewords, dtype=np.float64)
        if cw.ndim != 1 or cw.size < 2:
            raise InvalidInput("a format needs at least two codewords")
        if cw[0] != 0.0 or np.any(np.diff(cw) <= 0):
            raise InvalidInput("codewords must start at 0 and strictly increase")
        cw.setflags(write=False)
        bd = 0.5 * (cw[:-1] + cw[1:])
        bd.setflags(write=False)
        object.__setattr__(self, "codewords", cw)
        object.__setattr__(self, "boundaries", bd)

    @property
    def J(self) -> int:
        return int(self.codewords.size)

    @property
    def c_max(self) -> float:
        return float(self.codewords[-1])

    @property
    def delta_min(self) -> float:
        """Smallest positive codeword (the finest quantization step)."""
        return float(self.codewords[1])

    @property
    def log_range(self) -> tuple[float, float]:
        return float(self.e_min), float(self.e_max + np.log2(1.5))

    @property
    def signed_codewords(self) -> np.ndarray:
        """Sorted signed codeword table; ``-0`` and ``+0`` share one entry."""
        cw = self.codewords
        return np.concatenate([-cw[:0:-1], cw])

    def __hash__(self):
        return hash(self.name)

    def __eq__(self, other):
        return isinstance(other, MxFormat) and self.name == other.name


_E2M1 = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)

MXFP4 = MxFormat(FormatName.MXFP4_E2M1, np.array(_E2M1), ScaleRule.POW2_FLOOR_OF_MAX, e_min=-1, e_max=2)
MXINT4 = MxFormat(FormatName.MXINT4, np.arange(8) / 4.0, ScaleRule.POW2_FLOOR_OF_MAX, e_min=-2, e_max=0)
NVFP4 = MxFormat(FormatName.NVFP4_E2M1, np.array(_E2M1), ScaleRule.OPTIMIZED, e_min=-1, e_max=2)

_FORMATS = {f.name.value: f for f in (MXFP4, MXINT4, NVFP4)}


def get_format(name) -> MxFormat:
    """Look up a format by its config name (``mxfp4``, ``mxint4``, ``nvfp4``)."""
    if isinstance(name, MxFormat):
        return name
    key = name.value if isinstance(name, FormatName) else str(name).lower()
    try:
        return _FORMATS[key]
    except KeyError:
        raise InvalidInput(f"unknown format {name!r}; expected one of {sorted(_FORMATS)}") from None


def pow2_floor(x):
    """``2**floor(log2 x)`` computed exactly via frexp; zeros map to 1."""
    x = np.asarray(x, dtype=np.float64)
    m, e = np.frexp(x)
    out = np.ldexp(1.0, e - 1)
    return np.where(x > 0, out, 1.0)


def pow2_round(x):
    """``2**round(log2 x)``; zeros map to 1.

    The rounding threshold is the geometric midpoint ``2**(e - 1/2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    m, e = np.frexp(x)
    e = np.where(m < np.sqrt(0.5), e - 1, e)
    return np.where(x > 0, np.ldexp(1.0, e), 1.0)


def _check_finite(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInput("input contains non-finite values")
    return a


def default_scale(block, fmt: MxFormat = MXFP4) -> float:
    """Shared scale of one block when no calibrated scale is supplied.

    For power-of-two formats this is ``2**floor(log2 max|z|)``. An all-zero
    block gets scale 1.
    """
    block = _check_finite(block)
    return float(block_scales(block[None, :], fmt)[0])


def block_scales(rows, fmt: MxFormat = MXFP4, rule: str | None = None):
    """Scales for every row of ``rows`` (last axis = lanes).

    ``rule`` overrides the format's rule:

    ``"floor"``
        ``2**floor(log2 max)`` (the shared-exponent rule).
    ``"round"``/``"ceil"``/``"floor_aligned"``
        align the row maximum to ``c_max``: ``pow2(max / c_max)`` with the
        named power-of-two projection (``floor_aligned`` uses floor).
    ``"real"``
        ``max / c_max`` without power-of-two projection.
    """
    amax = np.max(np.abs(rows), axis=-1)
    if rule is None:
        rule = "floor" if fmt.scale_rule is ScaleRule.POW2_FLOOR_OF_MAX else "real"
    if rule == "floor":
        return pow2_floor(amax)
    ratio = amax / fmt.c_max
    if rule == "round":
        return pow2_round(ratio)
    if rule == "floor_aligned":
        return pow2_floor(ratio)
    if rule == "ceil":
        f = pow2_floor(ratio)
        return np.where((ratio > 0) & (f < ratio), 2.0 * f, f)
    if rule == "real":
        return np.where(amax > 0, ratio, 1.0)
    raise InvalidInput(f"unknown scale rule {rule!r}")


def bin_index(values, fmt: MxFormat = MXFP4):
    """Magnitude bin of each normalized value (0 = zero codeword).

    Bins are left-open: ``|v| == d_j`` belongs to bin ``j - 1``.
    """
    return np.searchsorted(fmt.boundaries, np.abs(values), side="left")


def project_nearest(values, fmt: MxFormat = MXFP4):
    """Nearest signed codeword of each normalized value, saturating at ``c_max``."""
    v = np.asarray(values, dtype=np.float64)
    out = np.copysign(fmt.codewords[bin_index(v, fmt)], v)
    # collapse -0 to +0
    out = out + 0.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class QuantizedBlock:
    scale: float
    codes: np.ndarray
    dequantized: np.ndarray


def _signed_codes(normalized, fmt):
    idx = bin_index(normalized, fmt)
    zero = fmt.J - 1
    return np.where(normalized < 0, zero - idx, zero + idx)


def quantize_block(block, scale: float, fmt: MxFormat = MXFP4) -> QuantizedBlock:
    """Quantize one block with a given shared scale.

    ``codes`` index ``fmt.signed_codewords``.
    """
    block = _check_finite(block)
    if not scale > 0:
        raise InvalidScale(f"scale must be positive, got {scale!r}")
    a = block / scale
    deq = scale * project_nearest(a, fmt)
    return QuantizedBlock(float(scale), _signed_codes(a, fmt), np.asarray(deq))


def quantize_rows(rows, scales, fmt: MxFormat = MXFP4):
    """Vectorized ``quantize_block`` over the leading axes.

    Returns ``(dequantized, codes)`` with ``codes`` indexing
    ``fmt.signed_codewords``.
    """
    rows = np.asarray(rows, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(~(scales > 0)):
        raise InvalidScale("all scales must be positive")
    a = rows / scales[..., None]
    deq = scales[..., None] * (np.copysign(fmt.codewords[bin_index(a, fmt)], a) + 0.0)
    return deq, _signed_codes(a, fmt)


def occupancy_histogram(values, fmt: MxFormat = MXFP4) -> np.ndarray:
    """Fraction of normalized values falling in each of the ``J`` magnitude bins."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InvalidInput("occupancy histogram of an empty set")
    counts = np.bincount(bin_index(v, fmt), minlength=fmt.J)
    return counts / v.size
