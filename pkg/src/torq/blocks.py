"""Calibration activations in the token x block x lane layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ShapeError

__all__ = [
    "BlockShape",
    "BlockTensor",
    "PositionCovariance",
    "reshape_tokens",
    "estimate_covariances",
    "block_variances",
]

DEFAULT_RIDGE = 1e-8


@dataclass(frozen=True)
class BlockShape:
    """``B`` blocks of ``K`` lanes; a token has ``d = B * K`` features."""

    B: int
    K: int

    def __post_init__(self):
        if int(self.B) < 2 or int(self.K) < 2:
            raise ShapeError(f"need B >= 2 and K >= 2, got B={self.B}, K={self.K}")

    @property
    def d(self) -> int:
        return self.B * self.K


@dataclass(frozen=True)
class BlockTensor:
    """``T`` samples stored as a read-only ``(T, B, K)`` float64 array.

    Element ``i`` of a token vector sits in block ``i // K``, lane ``i % K``.
    """

    shape: BlockShape
    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim != 3 or s.shape[1:] != (self.shape.B, self.shape.K):
            raise ShapeError(f"expected (T, {self.shape.B}, {self.shape.K}), got {s.shape}")
        if s.shape[0] < 1:
            raise InvalidInput("a block tensor needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise InvalidInput("block tensor contains non-finite values")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    def flatten(self) -> np.ndarray:
        """Inverse of :func:`reshape_tokens`: a ``(T, d)`` array."""
        return self.samples.reshape(self.T, self.shape.d)

    def stacked(self) -> np.ndarray:
        """All blocks of all samples as a ``(T*B, K)`` matrix."""
        return self.samples.reshape(-1, self.shape.K)


def reshape_tokens(flat, shape: BlockShape) -> BlockTensor:
    flat = np.asarray(flat)
    if flat.ndim == 1:
        flat = flat[None, :]
    if flat.ndim != 2 or flat.shape[1] != shape.d:
        raise ShapeError(f"expected (T, {shape.d}) tokens, got {flat.shape}")
    return BlockTensor(shape, flat.reshape(flat.shape[0], shape.B, shape.K))


@dataclass(frozen=True)
class PositionCovariance:
    """Per-lane second-moment matrices ``(K, B, B)`` and their mean over lanes."""

    per_position: np.ndarray
    pooled: np.ndarray
    ridge: float


def estimate_covariances(data: BlockTensor, ridge: float = DEFAULT_RIDGE) -> PositionCovariance:
    """Uncentered block covariance for every lane position.

    ``Sigma_k = (1/T) sum_t x_t[:, k] x_t[:, k]^T + ridge * I``. Blocks are
    assumed zero-mean, so no mean is subtracted and the diagonal equals the
    expected per-block energy in that lane.
    """
    x = data.samples
    T, B, K = x.shape
    # one fixed-order reduction per lane keeps results bitwise reproducible
    per = np.empty((K, B, B))
    for k in range(K):
        col = x[:, :, k]
        per[k] = col.T @ col / T
    per += ridge * np.eye(B)
    pooled = per.mean(axis=0)
    return PositionCovariance(per, pooled, float(ridge))


def block_variances(data: BlockTensor) -> np.ndarray:
    """Squared norm of every block, shape ``(T, B)``."""
    return np.einsum("tbk,tbk->tb", data.samples, data.samples)
