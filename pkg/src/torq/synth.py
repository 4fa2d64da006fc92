"""Seeded synthetic activations for calibration experiments."""

from __future__ import annotations

import enum

import numpy as np

from .blocks import BlockShape, BlockTensor, reshape_tokens
from .errors import InvalidInput

__all__ = ["Distribution", "OutlierMode", "generate", "generate_blocks"]


class Distribution(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LOGNORMAL = "lognormal"
    LAPLACE = "laplace"
    OUTLIER_MIXTURE = "outlier_mixture"


class OutlierMode(str, enum.Enum):
    # CHANNEL: a fixed set of feature indices is scaled in every token, so
    # the block energies are persistently unbalanced. ELEMENT: every entry
    # is scaled independently, which is balanced in expectation.
    CHANNEL = "channel"
    ELEMENT = "element"


def generate(
    dist,
    T: int,
    d: int,
    seed: int = 42,
    *,
    outlier_prob: float = 0.01,
    outlier_scale: float = 50.0,
    outlier_mode=OutlierMode.CHANNEL,
) -> np.ndarray:
    """Draw a ``(T, d)`` float64 tensor.

    ``lognormal`` draws magnitudes ``exp(N(0, 1))`` with random signs.
    ``outlier_mixture`` draws ``N(0, 1)`` entries and multiplies a fraction
    ``outlier_prob`` of them by ``outlier_scale``.
    """
    dist = Distribution(dist)
    mode = OutlierMode(outlier_mode)
    if T < 1 or d < 1:
        raise InvalidInput("T and d must be positive")
    if not 0.0 <= outlier_prob <= 1.0:
        raise InvalidInput("outlier_prob must lie in [0, 1]")
    if not outlier_scale > 0:
        raise InvalidInput("outlier_scale must be positive")
    rng = np.random.default_rng(seed)
    if dist is Distribution.GAUSSIAN:
        return rng.standard_normal((T, d))
    if dist is Distribution.LAPLACE:
        return rng.laplace(size=(T, d))
    if dist is Distribution.LOGNORMAL:
        mag = np.exp(rng.standard_normal((T, d)))
        return np.where(rng.random((T, d)) < 0.5, -mag, mag)
    x = rng.standard_normal((T, d))
    if mode is OutlierMode.CHANNEL:
        mask = rng.random(d) < outlier_prob
        x[:, mask] *= outlier_scale
    else:
        mask = rng.random((T, d)) < outlier_prob
        x[mask] *= outlier_scale
    return x


def generate_blocks(dist, T: int, shape: BlockShape, seed: int = 42, **kw) -> BlockTensor:
    return reshape_tokens(generate(dist, T, shape.d, seed, **kw), shape)
