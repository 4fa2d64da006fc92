"""Evaluation quantities and before/after reports.

Everything here is a plain function of arrays. Reports serialize to a
versioned JSON document (``torq-report/1``) with sorted keys and floats
written with 17 significant digits, so identical inputs give identical
bytes.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import BlockTensor, block_variances
from .errors import InvalidInput, ShapeError
from .formats import MXFP4, MxFormat, block_scales, get_format, occupancy_histogram, project_nearest
from .intra import code_loss

__all__ = [
    "SCHEMA",
    "KL_BINS",
    "BoundDiagnostics",
    "CalibReport",
    "quantization_mse",
    "mse_loss",
    "granularity_term",
    "bound_diagnostics",
    "bound_summary",
    "variance_spread",
    "build_report",
    "report_to_json",
    "emit_report",
    "histogram_csv",
    "arm_stats",
    "atomic_write",
]

SCHEMA = "torq-report/1"
KL_BINS = 32


def quantization_mse(x, xhat) -> float:
    """Mean squared elementwise difference."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return float(np.mean((x - xhat) ** 2))


def mse_loss(normalized, fmt: MxFormat = MXFP4) -> float:
    """Projection error in normalized space, the alternative to ``L_code``."""
    a = np.asarray(normalized, dtype=np.float64)
    return float(np.mean((a - project_nearest(a, fmt)) ** 2))


def granularity_term(fmt: MxFormat, K: int) -> float:
    # uniform-noise error of the finest step, summed over K lanes
    return fmt.delta_min**2 / 12.0 * K


@dataclass(frozen=True)
class BoundDiagnostics:
    """Factors of the log-magnitude lower bound for one block.

    ``bound = granularity * shape_factor * matching_factor``. ``zeros`` is
    the number of exactly-zero entries left out of the log statistics.
    """

    granularity: float
    shape_factor: float
    matching_factor: float
    bound: float
    log_var: float
    kl: float
    n: int
    zeros: int


def _kl_to_uniform(u, lo, hi, bins=KL_BINS):
    # plug-in estimate; out-of-range values land in the edge bins
    idx = np.clip(((u - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    p = np.bincount(idx, minlength=bins) / u.size
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * bins)))


def bound_diagnostics(normalized_block, fmt: MxFormat = MXFP4, K: int | None = None):
    """Bound factors for the normalized magnitudes of one block.

    Parameters
    ----------
    normalized_block : array_like
        Block values divided by the block scale. Zeros are excluded.
    fmt : MxFormat
    K : int, optional
        Lane count for the granularity term; defaults to the block length.

    Returns
    -------
    BoundDiagnostics or None
        ``None`` when fewer than two nonzero magnitudes remain, since the
        log-variance is then undefined.
    """
    a = np.abs(np.asarray(normalized_block, dtype=np.float64).ravel())
    K = a.size if K is None else int(K)
    nz = a[a > 0]
    zeros = int(a.size - nz.size)
    if nz.size < 2:
        return None
    u = np.log2(nz)
    var = float(np.var(u))
    lo, hi = fmt.log_range
    kl = _kl_to_uniform(u, lo, hi)
    g = granularity_term(fmt, K)
    shape = math.exp(2.0 * var)
    match = math.exp(kl)
    return BoundDiagnostics(g, shape, match, g * shape * match, var, kl, int(nz.size), zeros)


def bound_summary(normalized, fmt: MxFormat = MXFP4) -> dict:
    """Per-block bounds over the rows of ``(N, K)`` plus a pooled estimate.

    ``total`` sums the per-block bounds of every block where the bound is
    defined. ``pooled`` treats all nonzero magnitudes as one population.
    """
    z = np.asarray(normalized, dtype=np.float64)
    z = z.reshape(-1, z.shape[-1])
    K = z.shape[1]
    mag = np.abs(z)
    nz = mag > 0
    cnt = nz.sum(axis=1)
    ok = cnt >= 2
    u = np.log2(np.where(nz, mag, 1.0))
    mean = np.where(ok, (u * nz).sum(axis=1) / np.maximum(cnt, 1), 0.0)
    var = np.where(ok, (((u - mean[:, None]) ** 2) * nz).sum(axis=1) / np.maximum(cnt, 1), 0.0)
    lo, hi = fmt.log_range
    idx = np.clip(((u - lo) / (hi - lo) * KL_BINS).astype(np.int64), 0, KL_BINS - 1)
    rows = np.repeat(np.arange(z.shape[0]), K)
    hist = np.zeros((z.shape[0], KL_BINS))
    np.add.at(hist, (rows[nz.ravel()], idx.ravel()[nz.ravel()]), 1.0)
    p = hist / np.maximum(cnt, 1)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(p > 0, p * np.log(p * KL_BINS), 0.0).sum(axis=1)
    g = granularity_term(fmt, K)
    per = g * np.exp(2.0 * var) * np.exp(kl)
    pooled = bound_diagnostics(z, fmt, K)
    return {
        "blocks": int(z.shape[0]),
        "undefined_blocks": int((~ok).sum()),
        "zeros": int(z.size - cnt.sum()),
        "total": float(per[ok].sum()),
        "mean_shape_factor": float(np.exp(2.0 * var[ok]).mean()) if ok.any() else None,
        "mean_matching_factor": float(np.exp(kl[ok]).mean()) if ok.any() else None,
        "pooled": None if pooled is None else asdict(pooled),
    }


def variance_spread(data) -> dict:
    """Coefficient of variation and max/mean of all block energies ``||z_tb||^2``."""
    if not isinstance(data, BlockTensor):
        arr = np.asarray(data, dtype=np.float64)
        e = np.einsum("...k,...k->...", arr, arr).ravel()
    else:
        e = block_variances(data).ravel()
    if e.size < 2:
        raise InvalidInput("need at least two blocks")
    mean = e.mean()
    if mean == 0:
        return {"cv": 0.0, "max_over_mean": 1.0}
    return {"cv": float(e.std() / mean), "max_over_mean": float(e.max() / mean)}


@dataclass
class CalibReport:
    """Before/after statistics of one tensor.

    "before" is plain round-to-nearest on the unrotated data; "after" is the
    rotated pipeline. ``arms`` is filled by ablation comparisons.
    """

    B: int
    K: int
    format: str
    T: int
    mse_before: float
    mse_after: float
    code_loss_before: float
    code_loss_after: float
    mse_loss_before: float
    mse_loss_after: float
    occupancy_before: list
    occupancy_after: list
    spread_before: dict
    spread_after: dict
    bound_before: dict | None
    bound_after: dict | None
    timing: dict = field(default_factory=dict)  # empty unless asked for; wall time is not reproducible
    scale_rule: str = "floor"
    scale_mode: str = "dynamic"
    arms: list | None = None
    bundle_meta: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = SCHEMA
        return d


def _normalized(z, fmt, rule):
    return z / block_scales(z, fmt, rule)[..., None]


def arm_stats(x, bundle, name: str, scale_mode: str = "dynamic") -> dict:
    """MSE, code loss and energy spread of one bundle applied to ``(T, B, K)`` data."""
    from .pipeline import explicit_inverse, forward_quantize

    fmt = bundle.fmt
    z = bundle.r_inter @ x @ bundle.r_intra
    zhat, _ = forward_quantize(x, bundle, scale_mode)
    xhat = explicit_inverse(zhat, bundle, order="C").reshape(x.shape)
    a = _normalized(z, fmt, bundle.scale_rule)
    sp = variance_spread(z)
    return {
        "name": name,
        "mse": quantization_mse(x, xhat),
        "code_loss": code_loss(a.reshape(-1, x.shape[-1]), fmt),
        "cv": sp["cv"],
        "max_over_mean": sp["max_over_mean"],
    }


def build_report(
    data: BlockTensor, bundle, scale_mode: str = "dynamic", *, bounds: bool = True, arms=None, timing=None
):
    """Compare RTN on ``data`` with the bundle's rotated quantization.

    Code loss and occupancy are measured in normalized space with the
    bundle's scale rule on both sides, so the rotation is the only change.
    """
    from .pipeline import explicit_inverse, forward_quantize, rtn_baseline

    if data.shape != bundle.shape:
        raise ShapeError(f"data shape {data.shape} does not match bundle {bundle.shape}")
    fmt = bundle.fmt
    x = data.samples
    K = data.shape.K
    _, mse_before = rtn_baseline(x, fmt)
    z = bundle.r_inter @ x @ bundle.r_intra
    zhat, _ = forward_quantize(x, bundle, scale_mode)
    mse_after = quantization_mse(x, explicit_inverse(zhat, bundle, order="C").reshape(x.shape))
    a0 = _normalized(x, fmt, bundle.scale_rule).reshape(-1, K)
    a1 = _normalized(z, fmt, bundle.scale_rule).reshape(-1, K)
    meta = dict(bundle.calib_meta)
    return CalibReport(
        B=data.shape.B,
        K=K,
        format=fmt.name.value,
        T=data.T,
        mse_before=mse_before,
        mse_after=mse_after,
        code_loss_before=code_loss(a0, fmt),
        code_loss_after=code_loss(a1, fmt),
        mse_loss_before=mse_loss(a0, fmt),
        mse_loss_after=mse_loss(a1, fmt),
        occupancy_before=occupancy_histogram(a0, fmt).tolist(),
        occupancy_after=occupancy_histogram(a1, fmt).tolist(),
        spread_before=variance_spread(x),
        spread_after=variance_spread(z),
        bound_before=bound_summary(a0, fmt) if bounds else None,
        bound_after=bound_summary(a1, fmt) if bounds else None,
        timing=dict(timing or {}),
        scale_rule=bundle.scale_rule,
        scale_mode=scale_mode,
        arms=arms,
        bundle_meta=meta or None,
    )


# --- serialization ----------------------------------------------------------


def _json(obj) -> str:
    # json.dumps cannot fix the float precision, so floats are written by hand
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return "null"
        s = format(v, ".17g")
        return s if any(c in s for c in ".en") else s + ".0"
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ",".join(f"{_json(k)}:{_json(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def report_to_json(report) -> str:
    d = report.to_dict() if isinstance(report, CalibReport) else dict(report)
    d.setdefault("schema", SCHEMA)
    return _json(d) + "\n"


def histogram_csv(report: CalibReport, side: str = "after") -> str:
    """One occupancy histogram (``"before"`` or ``"after"``) as CSV.

    Bin bounds are in normalized space; the last bin is open above.
    """
    fmt = get_format(report.format)
    hist = {"before": report.occupancy_before, "after": report.occupancy_after}[side]
    edges = np.concatenate([[0.0], fmt.boundaries, [np.inf]])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_index", "lower_bound", "upper_bound", "probability"])
    for j, p in enumerate(hist):
        hi = "inf" if not np.isfinite(edges[j + 1]) else _json(edges[j + 1])
        w.writerow([j, _json(edges[j]), hi, _json(p)])
    return buf.getvalue()


def atomic_write(path, data: bytes):
    """Write via a temporary file in the target directory and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_report(report, path, csv_path=None, side: str = "after"):
    """Write the JSON report and optionally one histogram as CSV."""
    atomic_write(path, report_to_json(report).encode())
    if csv_path is not None:
        atomic_write(csv_path, histogram_csv(report, side).encode())
