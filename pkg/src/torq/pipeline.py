"""Calibration and inference with the two-level rotation.

A token ``x`` of length ``d = B*K`` is viewed as the ``(B, K)`` matrix
``X = x.reshape(B, K)``. The forward path is

    Z = R_inter @ X @ R_intra,   Zhat_b = s_b * Q(Z_b / s_b)  (per block row),

and the explicit inverse is ``Xhat = R_inter^T @ Zhat @ R_intra^T``. Here
``Zhat`` already carries its scales, so no scale factor appears in the
inverse.

Vectorization order matters for weight fusion. The default is column-major
(``order="F"``, stacking columns), for which

    vec(A Z B) = (B^T kron A) vec(Z),

so a following linear layer ``W`` becomes ``W' = W (R_intra kron R_inter^T)``
and ``W' vec(Zhat) == W xhat``. Row-major flattening (``order="C"``) is the
token layout of :mod:`torq.blocks`; there the factor is
``R_inter^T kron R_intra``.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockShape, BlockTensor, DEFAULT_RIDGE, estimate_covariances, reshape_tokens
from .errors import ConvergenceError, ShapeError
from .formats import MXFP4, MxFormat, block_scales, get_format, quantize_rows
from .inter import EqualizationConfig, InterRotation, apply_inter, build_inter_rotation
from .intra import _POW2_RULES, IntraConfig, ScaleVector, build_intra_rotation

__all__ = [
    "RotationBundle",
    "FusedWeights",
    "calibrate",
    "identity_bundle",
    "forward_quantize",
    "explicit_inverse",
    "fuse_weights",
    "kron_fusion_matrix",
    "rtn_baseline",
    "quantize_tokens",
    "config_hash",
    "ARMS",
    "ablation_bundles",
]

ARMS = ("rtn", "inter_only", "intra_only", "full")

DEFAULT_T = 128


@dataclass(frozen=True)
class RotationBundle:
    """Everything needed to quantize tokens of one tensor.

    ``scale_rule`` is the rule used when scales are recomputed per input:
    ``"floor"`` is the shared-exponent rule, while ``"round"``/``"floor_aligned"``/
    ``"ceil"`` align each block maximum with the largest codeword.
    """

    shape: BlockShape
    r_inter: np.ndarray
    r_intra: np.ndarray
    scales: ScaleVector
    format: str = "mxfp4"
    scale_rule: str = "floor"
    calib_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        B, K = self.shape.B, self.shape.K
        if self.r_inter.shape != (B, B) or self.r_intra.shape != (K, K) or len(self.scales) != B:
            raise ShapeError("bundle matrices do not match the block shape")
        for m in (self.r_inter, self.r_intra):
            if np.abs(m.T @ m - np.eye(m.shape[0])).max() > 1e-10:
                raise ValueError("bundle rotation is not orthogonal")

    @property
    def fmt(self) -> MxFormat:
        return get_format(self.format)

    @property
    def parameter_count(self) -> int:
        return self.r_inter.size + self.r_intra.size + len(self.scales)


@dataclass(frozen=True)
class FusedWeights:
    original_shape: tuple
    fused: np.ndarray


def config_hash(*cfgs) -> str:
    blob = json.dumps([repr(c) for c in cfgs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def identity_bundle(shape: BlockShape, fmt="mxfp4") -> RotationBundle:
    """No rotations and unit scales; with dynamic scales this is plain RTN."""
    return RotationBundle(
        shape, np.eye(shape.B), np.eye(shape.K), ScaleVector(np.ones(shape.B)), get_format(fmt).name.value
    )


def calibrate(
    calib: BlockTensor,
    inter_cfg: EqualizationConfig | None = None,
    intra_cfg: IntraConfig | None = None,
    fmt="mxfp4",
    *,
    use_inter: bool = True,
    use_intra: bool = True,
    strict: bool = True,
    ridge: float = DEFAULT_RIDGE,
    tag: str = "",
    timings: dict | None = None,
) -> RotationBundle:
    """Build a :class:`RotationBundle` from calibration samples.

    Steps: pooled covariance, inter rotation equalizing its diagonal,
    rotation of the samples, then intra rotation and scales on all rotated
    blocks stacked as a ``(T*B, K)`` matrix. ``use_inter``/``use_intra``
    switch the two levels off for ablations.

    With ``strict=False`` a ConvergenceError from the inter stage is
    swallowed: its best-effort rotation is kept and ``calib_meta`` gets
    ``"converged": False``.

    Wall-clock stage times go into ``timings`` when a dict is passed; they
    are kept out of ``calib_meta`` so bundles stay byte-reproducible.
    """
    fmt = get_format(fmt)
    inter_cfg = inter_cfg or EqualizationConfig()
    intra_cfg = intra_cfg or IntraConfig()
    B, K = calib.shape.B, calib.shape.K
    meta = {
        "T": calib.T,
        "dataset": tag,
        "config_hash": config_hash(inter_cfg, intra_cfg, fmt.name.value, use_inter, use_intra, ridge),
        "use_inter": use_inter,
        "use_intra": use_intra,
        "converged": True,
        "loss_trace": [],
        "achieved_spread": 0.0,
        "inter_steps": 0,
    }
    timing = timings if timings is not None else {}

    t0 = time.perf_counter()
    if use_inter:
        cov = estimate_covariances(calib, ridge)
        try:
            rot = build_inter_rotation(cov.pooled, inter_cfg)
        except ConvergenceError as exc:
            if strict:
                raise
            rot = exc.rotation
            meta["converged"] = False
        r_inter = rot.matrix
        meta["achieved_spread"] = rot.achieved_spread
        meta["inter_steps"] = len(rot.steps)
    else:
        r_inter = np.eye(B)
    timing["inter"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rotated = apply_inter(calib.samples, r_inter)
    if use_intra:
        res = build_intra_rotation(rotated.reshape(-1, K), intra_cfg, fmt)
        r_intra = res.matrix
        meta["loss_trace"] = list(res.loss_trace)
        meta["pre_r_losses"] = list(res.pre_r_losses)
        rule = _POW2_RULES[intra_cfg.pow2_mode]
    else:
        r_intra = np.eye(K)
        rule = "floor"
    timing["intra"] = time.perf_counter() - t0

    # static per-block scales from the largest magnitude seen over all samples
    z = rotated @ r_intra
    pooled_max = np.max(np.abs(z), axis=0)
    scales = block_scales(pooled_max, fmt, rule)
    return RotationBundle(calib.shape, r_inter, r_intra, ScaleVector(scales), fmt.name.value, rule, meta)


def _as_blocks(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != (shape.B, shape.K):
        raise ShapeError(f"expected (..., {shape.B}, {shape.K}), got {x.shape}")
    return x


def forward_quantize(x, bundle: RotationBundle, scale_mode: str = "bundle"):
    """Rotate and quantize ``(B, K)`` blocks (or a ``(T, B, K)`` stack).

    ``scale_mode`` is ``"bundle"`` (calibrated static scales) or
    ``"dynamic"`` (recomputed per input block with ``bundle.scale_rule``).

    Returns ``(zhat, codes)``: dequantized rotated blocks and indices into
    the format's signed codeword table.
    """
    x = _as_blocks(x, bundle.shape)
    fmt = bundle.fmt
    z = bundle.r_inter @ x @ bundle.r_intra
    if scale_mode == "bundle":
        scales = np.broadcast_to(bundle.scales.scales, z.shape[:-1])
    elif scale_mode == "dynamic":
        scales = block_scales(z, fmt, bundle.scale_rule)
    else:
        raise ValueError(f"unknown scale_mode {scale_mode!r}")
    return quantize_rows(z, scales, fmt)


def explicit_inverse(zhat, bundle: RotationBundle, order: str = "F"):
    """Undo both rotations and flatten: ``vec(R_inter^T Zhat R_intra^T)``.

    ``order="F"`` stacks columns; ``"C"`` returns the original token layout.
    """
    zhat = _as_blocks(zhat, bundle.shape)
    xhat = bundle.r_inter.T @ zhat @ bundle.r_intra.T
    return _vec(xhat, order)


def _vec(m, order):
    if order == "C":
        return m.reshape(*m.shape[:-2], -1)
    if order == "F":
        return np.swapaxes(m, -1, -2).reshape(*m.shape[:-2], -1)
    raise ValueError(f"order must be 'C' or 'F', got {order!r}")


def kron_fusion_matrix(bundle: RotationBundle, order: str = "F"):
    """The ``d x d`` factor ``M`` with ``explicit_inverse(Z) == M @ vec(Z)``."""
    if order == "C":
        return np.kron(bundle.r_inter.T, bundle.r_intra)
    if order == "F":
        return np.kron(bundle.r_intra, bundle.r_inter.T)
    raise ValueError(f"order must be 'C' or 'F', got {order!r}")


def fuse_weights(w, bundle: RotationBundle, order: str = "F") -> FusedWeights:
    """Absorb the inverse rotations into the next layer's weights.

    ``W' @ vec(Zhat) == W @ explicit_inverse(Zhat)`` for every ``Zhat``.
    Each row of ``W``, viewed as a ``(B, K)`` matrix ``V``, maps to
    ``R_inter V R_intra``; the Kronecker product is never formed.
    """
    w = np.asarray(w, dtype=np.float64)
    B, K = bundle.shape.B, bundle.shape.K
    if w.ndim != 2 or w.shape[1] != B * K:
        raise ShapeError(f"weight must have {B * K} columns, got {w.shape}")
    if order == "C":
        rows = w.reshape(-1, B, K)
    elif order == "F":
        rows = np.swapaxes(w.reshape(-1, K, B), 1, 2)
    else:
        raise ValueError(f"order must be 'C' or 'F', got {order!r}")
    fused = bundle.r_inter @ rows @ bundle.r_intra
    return FusedWeights(w.shape, _vec(fused, order))


def rtn_baseline(x, fmt=MXFP4):
    """Round-to-nearest with the format's default shared scale, no rotation.

    Returns ``(zhat, mse)``.
    """
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64)
    zhat, _ = quantize_rows(x, block_scales(x, fmt), fmt)
    return zhat, float(np.mean((zhat - x) ** 2))


def quantize_tokens(tokens, bundle: RotationBundle, scale_mode: str = "dynamic"):
    """Quantize ``(T, d)`` tokens end to end, returning ``(T, d)`` reconstructions."""
    bt = reshape_tokens(tokens, bundle.shape)
    zhat, _ = forward_quantize(bt.samples, bundle, scale_mode)
    return explicit_inverse(zhat, bundle, order="C")


def ablation_bundles(calib: BlockTensor, inter_cfg=None, intra_cfg=None, fmt="mxfp4", **kw) -> dict:
    """The four comparison arms in fixed order.

    ``rtn`` is the identity bundle with the shared-exponent scale, so
    dynamic quantization through it is exactly :func:`rtn_baseline`. The
    other arms switch the two rotation levels on and off.
    """
    out = {"rtn": identity_bundle(calib.shape, fmt)}
    for name, ui, ua in (("inter_only", True, False), ("intra_only", False, True), ("full", True, True)):
        out[name] = calibrate(calib, inter_cfg, intra_cfg, fmt, use_inter=ui, use_intra=ua, **kw)
    return out
