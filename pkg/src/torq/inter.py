"""Inter-block rotation: equalize the diagonal of a block covariance.

A sequence of Givens rotations moves energy from blocks above the mean
energy ``c = tr(Sigma) / B`` to blocks below it. In the default
``EXACT_TRANSFER`` mode each rotation sets one diagonal entry to exactly
``c``; that index is then frozen, so at most ``B - 1`` rotations are needed.

``JACOBI_ARCTAN`` uses the off-diagonal-zeroing (Jacobi) angle
``0.5 * arctan(2 s_ij / (s_ii - s_jj))`` instead. It does not pin entries
and can stall, e.g. when ``s_ij == 0``; it is kept for comparison runs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockTensor
from .errors import ConvergenceError, NoTransferPossible, ShapeError

__all__ = [
    "AngleMode",
    "EqualizationConfig",
    "GivensStep",
    "InterRotation",
    "equalization_target",
    "select_pair",
    "equalizing_angle",
    "givens",
    "build_inter_rotation",
    "build_per_position",
    "apply_inter",
]


class AngleMode(str, enum.Enum):
    EXACT_TRANSFER = "exact_transfer"
    JACOBI_ARCTAN = "jacobi_arctan"


@dataclass(frozen=True)
class EqualizationConfig:
    """Stopping rule for :func:`build_inter_rotation`.

    ``epsilon`` is relative to the target ``c``: iteration stops once
    ``max_i |s_ii - c| <= epsilon * c``. ``max_sweeps`` defaults to ``4 B^2``.
    """

    epsilon: float = 1e-8
    max_sweeps: int | None = None
    angle_mode: AngleMode = AngleMode.EXACT_TRANSFER

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "angle_mode", AngleMode(self.angle_mode))

    def sweeps_for(self, B: int) -> int:
        n = 4 * B * B if self.max_sweeps is None else int(self.max_sweeps)
        if n < B:
            raise ValueError(f"max_sweeps must be >= B={B}")
        return n


@dataclass(frozen=True)
class GivensStep:
    i: int
    j: int
    theta: float


@dataclass(frozen=True)
class InterRotation:
    """Orthogonal ``matrix`` with ``diag(M Sigma M^T)`` equalized."""

    matrix: np.ndarray
    steps: tuple = field(default_factory=tuple)
    achieved_spread: float = 0.0
    target: float = 0.0


def equalization_target(sigma) -> float:
    sigma = np.asarray(sigma, dtype=np.float64)
    return float(np.trace(sigma) / sigma.shape[0])


def select_pair(sigma, c: float, pinned=None, eps: float = 0.0):
    """Most-above and most-below indices relative to ``c``, or ``None``.

    Only indices not in ``pinned`` are eligible and deviations of magnitude
    ``<= eps`` count as zero. Ties go to the lowest index. The returned pair
    is ordered ``(above, below)``, not by index.
    """
    dev = np.diagonal(np.asarray(sigma)) - c
    free = np.ones(dev.size, dtype=bool)
    if pinned is not None:
        free[list(pinned)] = False
    above = free & (dev > eps)
    below = free & (dev < -eps)
    if not above.any() or not below.any():
        return None
    i = int(np.argmax(np.where(above, dev, -np.inf)))
    j = int(np.argmax(np.where(below, -dev, -np.inf)))
    return i, j


def equalizing_angle(sigma, i: int, j: int, c: float, mode=AngleMode.EXACT_TRANSFER) -> float:
    """Angle of the rotation in plane ``(i, j)`` used for one transfer step.

    For ``EXACT_TRANSFER`` ``t = tan(theta)`` is the smaller-magnitude root of
    ``(s_jj - c) t^2 + 2 s_ij t + (s_ii - c) = 0``, which makes the rotated
    ``(i, i)`` entry equal ``c``.
    """
    s = np.asarray(sigma, dtype=np.float64)
    sii, sjj, sij = s[i, i], s[j, j], s[i, j]
    if AngleMode(mode) is AngleMode.JACOBI_ARCTAN:
        return 0.5 * float(np.arctan2(2.0 * sij, sii - sjj))
    a, cc = sjj - c, sii - c
    if not a * cc < 0:
        raise NoTransferPossible(f"deviations of {i} and {j} do not have opposite signs")
    disc = sij * sij - a * cc
    q = sij + np.copysign(np.sqrt(disc), sij)
    return float(np.arctan(-cc / q))


def givens(n: int, i: int, j: int, theta: float) -> np.ndarray:
    """``G`` with ``G[:, i] = cos e_i + sin e_j`` and ``G[:, j] = -sin e_i + cos e_j``."""
    g = np.eye(n)
    c, s = np.cos(theta), np.sin(theta)
    g[i, i] = g[j, j] = c
    g[j, i] = s
    g[i, j] = -s
    return g


def _rotate_inplace(sigma, acc, i, j, theta):
    # sigma <- G^T sigma G ; acc <- acc G, touching only rows/cols i, j
    c, s = np.cos(theta), np.sin(theta)
    ci, cj = sigma[:, i].copy(), sigma[:, j].copy()
    sigma[:, i] = c * ci + s * cj
    sigma[:, j] = -s * ci + c * cj
    ri, rj = sigma[i, :].copy(), sigma[j, :].copy()
    sigma[i, :] = c * ri + s * rj
    sigma[j, :] = -s * ri + c * rj
    ai, aj = acc[:, i].copy(), acc[:, j].copy()
    acc[:, i] = c * ai + s * aj
    acc[:, j] = -s * ai + c * aj


def build_inter_rotation(sigma, cfg: EqualizationConfig | None = None) -> InterRotation:
    """Orthogonal ``R`` such that ``diag(R Sigma R^T)`` is within tolerance of ``c``.

    Parameters
    ----------
    sigma : ndarray, (B, B)
        Symmetric covariance, ridge already added.
    cfg : EqualizationConfig, optional

    Returns
    -------
    InterRotation
        ``matrix`` is ``R``; ``steps`` records the Givens sequence ``G_1..G_n``
        with ``R = (G_1 ... G_n)^T``.

    Raises
    ------
    ConvergenceError
        If the sweep cap is hit; the best-effort rotation is attached.
    """
    cfg = cfg or EqualizationConfig()
    sig = np.array(sigma, dtype=np.float64)
    if sig.ndim != 2 or sig.shape[0] != sig.shape[1]:
        raise ShapeError(f"covariance must be square, got {sig.shape}")
    B = sig.shape[0]
    c = equalization_target(sig)
    tol = cfg.epsilon * abs(c)
    acc = np.eye(B)
    steps = []
    pinned = set()
    exact = cfg.angle_mode is AngleMode.EXACT_TRANSFER
    cap = cfg.sweeps_for(B)

    def spread():
        return float(np.max(np.abs(np.diagonal(sig) - c)))

    while spread() > tol:
        if len(steps) >= cap:
            rot = InterRotation(acc.T.copy(), tuple(steps), spread(), c)
            raise ConvergenceError(
                f"no convergence after {cap} rotations (spread {rot.achieved_spread:.3e})",
                rot.achieved_spread,
                rot,
            )
        pair = select_pair(sig, c, pinned if exact else None)
        if pair is None:
            # exact arithmetic would have converged; only rounding is left
            break
        i, j = pair
        theta = equalizing_angle(sig, i, j, c, cfg.angle_mode)
        _rotate_inplace(sig, acc, i, j, theta)
        steps.append(GivensStep(min(i, j), max(i, j), theta if i < j else -theta))
        if exact:
            pinned.add(i)
    return InterRotation(acc.T.copy(), tuple(steps), spread(), c)


def build_per_position(per_position, cfg: EqualizationConfig | None = None):
    """One inter rotation per lane covariance (analysis mode)."""
    return [build_inter_rotation(s, cfg) for s in per_position]


def apply_inter(data, rot):
    """``Y = R X`` for a ``(B, K)`` matrix, a ``(T, B, K)`` stack or a BlockTensor."""
    R = rot.matrix if isinstance(rot, InterRotation) else np.asarray(rot)
    if isinstance(data, BlockTensor):
        return BlockTensor(data.shape, apply_inter(data.samples, R))
    x = np.asarray(data, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != R.shape[1]:
        raise ShapeError(f"rotation is {R.shape}, data rows are {x.shape[-2:]}")
    return np.matmul(R, x)
