"""Binary files: ``TORQ`` tensors and ``TORB`` rotation bundles.

Tensor file (all little-endian)::

    magic  b"TORQ"
    u32    version (1)
    u32    dtype code (1 = f32, 2 = f64)
    u64    T
    u64    d
    T*d    values, row-major

Bundle file::

    magic  b"TORB"
    u32    version (1)
    u32    B
    u32    K
    8s     format tag, NUL padded
    B*B    f64 r_inter, row-major
    K*K    f64 r_intra, row-major
    B      f64 scales
    u32    metadata length n
    n      UTF-8 JSON metadata (sorted keys), including ``scale_rule``

Writes are atomic (temporary file, then rename).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .blocks import BlockShape
from .errors import FormatError
from .intra import ScaleVector
from .metrics import _json, atomic_write
from .pipeline import RotationBundle

__all__ = ["write_tensor", "read_tensor", "write_bundle", "read_bundle", "bundle_bytes", "tensor_bytes"]

VERSION = 1
_TENSOR_HDR = struct.Struct("<4sIIQQ")
_BUNDLE_HDR = struct.Struct("<4sIII8s")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def tensor_bytes(x, dtype="float32") -> bytes:
    x = np.asarray(x)
    if x.ndim != 2:
        raise FormatError(f"tensor files hold 2-D arrays, got {x.ndim}-D")
    dt = np.dtype(dtype)
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {dt}")
    payload = np.ascontiguousarray(x, dtype=dt.newbyteorder("<")).tobytes()
    return _TENSOR_HDR.pack(b"TORQ", VERSION, _CODES[dt], x.shape[0], x.shape[1]) + payload


def write_tensor(path, x, dtype="float32"):
    atomic_write(path, tensor_bytes(x, dtype))


def read_tensor(path) -> np.ndarray:
    """Read a tensor file as float64 ``(T, d)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _TENSOR_HDR.size:
        raise FormatError(f"{path}: truncated header")
    magic, ver, code, T, d = _TENSOR_HDR.unpack_from(raw)
    if magic != b"TORQ":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if ver != VERSION:
        raise FormatError(f"{path}: unsupported version {ver}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    n = T * d * dt.itemsize
    if len(raw) != _TENSOR_HDR.size + n:
        raise FormatError(f"{path}: expected {n} payload bytes, found {len(raw) - _TENSOR_HDR.size}")
    return np.frombuffer(raw, dtype=dt, offset=_TENSOR_HDR.size).reshape(T, d).astype(np.float64)


def bundle_bytes(bundle: RotationBundle) -> bytes:
    B, K = bundle.shape.B, bundle.shape.K
    tag = bundle.format.encode("ascii")
    if len(tag) > 8:
        raise FormatError(f"format tag too long: {bundle.format}")
    meta = dict(bundle.calib_meta)
    meta["scale_rule"] = bundle.scale_rule
    blob = _json(meta).encode("utf-8")
    parts = [
        _BUNDLE_HDR.pack(b"TORB", VERSION, B, K, tag.ljust(8, b"\0")),
        np.ascontiguousarray(bundle.r_inter, dtype="<f8").tobytes(),
        np.ascontiguousarray(bundle.r_intra, dtype="<f8").tobytes(),
        np.ascontiguousarray(bundle.scales.scales, dtype="<f8").tobytes(),
        struct.pack("<I", len(blob)),
        blob,
    ]
    return b"".join(parts)


def write_bundle(path, bundle: RotationBundle):
    atomic_write(path, bundle_bytes(bundle))


def read_bundle(path) -> RotationBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic, ver, B, K, tag = _BUNDLE_HDR.unpack_from(raw)
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if magic != b"TORB":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if ver != VERSION:
        raise FormatError(f"{path}: unsupported version {ver}")
    off = _BUNDLE_HDR.size
    sizes = (B * B, K * K, B)
    need = off + 8 * sum(sizes) + 4
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload")
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64))
        off += 8 * n
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + mlen:
        raise FormatError(f"{path}: metadata length mismatch")
    meta = json.loads(raw[off:].decode("utf-8"))
    rule = meta.pop("scale_rule", "floor")
    return RotationBundle(
        BlockShape(B, K),
        arrays[0].reshape(B, B),
        arrays[1].reshape(K, K),
        ScaleVector(arrays[2]),
        tag.rstrip(b"\0").decode("ascii"),
        rule,
        meta,
    )
