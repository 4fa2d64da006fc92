"""Intra-block rotation: spread normalized magnitudes evenly over the codebook.

Blocks are rows of an ``(N, K)`` matrix. The loss is the squared distance
between the pooled codeword-occupancy histogram and the uniform histogram,

    L_code = sum_j (p_j - 1/J)^2.

Optimization alternates between

* an S-step, which re-derives power-of-two row scales so that each row's
  maximum lands near the largest codeword, and
* an R-step, which picks a few disjoint column pairs (imbalanced and
  mutually complementary) and rotates each pair by the angle minimizing the
  pooled loss with the scales held fixed.

For a fixed pair the loss is piecewise constant in the rotation angle. It
only changes where some rotated magnitude ``r |cos(phi - theta)|`` crosses a
decision boundary, so enumerating those critical angles and testing one
angle per interval finds the global optimum exactly. The angle zero is
always a candidate, which makes every accepted rotation non-increasing in
the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .formats import MXFP4, MxFormat, bin_index, block_scales

__all__ = [
    "IntraConfig",
    "ScaleVector",
    "OccupancyState",
    "IntraRotation",
    "code_loss",
    "loss_from_counts",
    "occupancy_state",
    "s_step",
    "imbalance_score",
    "complementarity",
    "select_pairs",
    "critical_angles",
    "pair_counts",
    "best_angle",
    "r_step",
    "build_intra_rotation",
]

TWO_PI = 2.0 * np.pi
QUARTER = 0.5 * np.pi
ANGLE_DEDUP = 1e-12

_POW2_RULES = {"round": "round", "floor": "floor_aligned", "ceil": "ceil"}


@dataclass(frozen=True)
class IntraConfig:
    """Settings for :func:`build_intra_rotation`.

    ``k_top`` and ``pairs_per_step`` default to ``K/2`` and ``K/4`` once
    the lane count is known. ``pairs_per_step=0`` turns the R-step into a
    no-op. ``angle_sample_blocks`` limits how many rows contribute critical
    angles. Candidate angles are still scored on all rows.
    ``pow2_mode`` picks the power-of-two projection of the S-step.
    """

    max_iter: int = 10
    epsilon: float = 1e-6
    k_top: int | None = None
    pairs_per_step: int | None = None
    lam: float = 1.0
    angle_sample_blocks: int | None = None
    pow2_mode: str = "round"
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.pow2_mode not in _POW2_RULES:
            raise ValueError(f"pow2_mode must be one of {sorted(_POW2_RULES)}")

    def resolve(self, K: int) -> tuple[int, int]:
        """``(k_top, P)`` for ``K`` lanes."""
        k_top = max(2, K // 2) if self.k_top is None else int(self.k_top)
        k_top = min(k_top, K)
        P = max(1, K // 4) if self.pairs_per_step is None else int(self.pairs_per_step)
        if P < 0 or P > k_top // 2:
            raise ValueError(f"need 0 <= pairs_per_step <= k_top//2 (k_top={k_top}), got {P}")
        return k_top, P


@dataclass(frozen=True)
class ScaleVector:
    """Positive power-of-two scale per block (row)."""

    scales: np.ndarray

    def __post_init__(self):
        s = np.array(self.scales, dtype=np.float64)
        if np.any(~(s > 0)):
            raise InvalidInput("scales must be positive")
        m, _ = np.frexp(s)
        if np.any(m != 0.5):
            raise InvalidInput("scales must be exact powers of two")
        s.setflags(write=False)
        object.__setattr__(self, "scales", s)

    def __len__(self):
        return self.scales.size


@dataclass(frozen=True)
class OccupancyState:
    per_column_hist: np.ndarray
    global_hist: np.ndarray
    loss: float


@dataclass(frozen=True)
class IntraRotation:
    """Result of the alternating optimization.

    ``loss_trace[0]`` is the loss of the unrotated input after the first
    S-step; entry ``i + 1`` is the loss after the ``i``-th R-step.
    ``pre_r_losses`` holds the loss right before each R-step (after its
    S-step), so ``loss_trace[i + 1] <= pre_r_losses[i]``.
    """

    matrix: np.ndarray
    loss_trace: tuple = ()
    final_scales: ScaleVector | None = None
    pre_r_losses: tuple = ()
    pairs: tuple = field(default=(), repr=False)


def _counts(values, fmt):
    return np.bincount(bin_index(np.ravel(values), fmt), minlength=fmt.J)


def loss_from_counts(counts, total=None):
    """``L_code`` from bin counts (last axis = bins)."""
    counts = np.asarray(counts, dtype=np.float64)
    J = counts.shape[-1]
    total = counts.sum(axis=-1, keepdims=True) if total is None else total
    return np.sum((counts / total - 1.0 / J) ** 2, axis=-1)


def code_loss(normalized, fmt: MxFormat = MXFP4) -> float:
    """Squared distance of the pooled occupancy histogram to uniform."""
    z = np.asarray(normalized, dtype=np.float64)
    if z.size == 0:
        raise InvalidInput("code loss of an empty matrix")
    return float(loss_from_counts(_counts(z, fmt), z.size))


def occupancy_state(normalized, fmt: MxFormat = MXFP4) -> OccupancyState:
    z = np.asarray(normalized, dtype=np.float64)
    bins = bin_index(z, fmt)
    K = z.shape[1]
    per = np.stack([np.bincount(bins[:, k], minlength=fmt.J) for k in range(K)]) / z.shape[0]
    glob = np.bincount(bins.ravel(), minlength=fmt.J) / z.size
    return OccupancyState(per, glob, float(loss_from_counts(glob, 1.0)))


def s_step(data, rot=None, fmt: MxFormat = MXFP4, pow2_mode: str = "round") -> ScaleVector:
    """Row scales ``pow2(max_i |z_bi| / c_max)`` of ``Z = data @ rot``.

    All-zero rows get scale 1.
    """
    z = np.asarray(data, dtype=np.float64)
    if rot is not None:
        z = z @ (rot.matrix if isinstance(rot, IntraRotation) else rot)
    return ScaleVector(block_scales(z, fmt, _POW2_RULES[pow2_mode]))


def imbalance_score(column_hist) -> float:
    h = np.asarray(column_hist, dtype=np.float64)
    return float(np.sum((h - 1.0 / h.size) ** 2))


def complementarity(hist_k, hist_l) -> float:
    a = np.asarray(hist_k, dtype=np.float64)
    b = np.asarray(hist_l, dtype=np.float64)
    return float(-np.dot(a - 1.0 / a.size, b - 1.0 / b.size))


def select_pairs(hists, cfg: IntraConfig | None = None):
    """Greedy disjoint column pairs ranked by ``h_k + h_l + lam * c_kl``.

    Candidates are the ``k_top`` most imbalanced columns (ties by index).
    Among equal scores the lexicographically smaller pair wins.
    """
    cfg = cfg or IntraConfig()
    hists = np.asarray(hists, dtype=np.float64)
    K, J = hists.shape
    if K < 2:
        raise InvalidInput("pair selection needs at least two columns")
    k_top, P = cfg.resolve(K)
    dev = hists - 1.0 / J
    h = np.sum(dev * dev, axis=1)
    pool = sorted(np.argsort(-h, kind="stable")[:k_top].tolist())
    scored = []
    for a_i, k in enumerate(pool):
        for l in pool[a_i + 1 :]:
            score = h[k] + h[l] - cfg.lam * float(dev[k] @ dev[l])
            scored.append((-score, k, l))
    scored.sort()
    used = set()
    pairs = []
    for _, k, l in scored:
        if len(pairs) >= P:
            break
        if k in used or l in used:
            continue
        pairs.append((k, l))
        used.update((k, l))
    return pairs


def _event_angles(u, v, fmt):
    """Critical angles of both rotated axes with their bin transitions.

    Returns ``(angles, lower_bin, direction)``. ``direction`` is +1 when
    the magnitude grows through the boundary above ``lower_bin`` as theta
    increases.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    d = fmt.boundaries
    rr, dd = np.broadcast_arrays(r[:, None], d[None, :])
    ok = rr >= dd
    rows, jj = np.nonzero(ok)
    alpha = np.arccos(np.minimum(dd[ok] / rr[ok], 1.0))
    ph = phi[rows]
    # |cos| is pi-periodic and the second axis is the first shifted by pi/2,
    # so the union over both axes is phi -/+ alpha + m*pi/2, m = 0..3
    shifts = np.arange(4) * (np.pi / 2)
    up = (ph[:, None] - alpha[:, None] + shifts).ravel()
    down = (ph[:, None] + alpha[:, None] + shifts).ravel()
    lower = np.repeat(jj, 4)
    angles = np.mod(np.concatenate([up, down]), TWO_PI)
    angles[angles >= TWO_PI] = 0.0
    lower = np.concatenate([lower, lower])
    direction = np.concatenate([np.ones(up.size, np.int64), -np.ones(down.size, np.int64)])
    return angles, lower, direction


def _group_sorted(angles, tol=ANGLE_DEDUP):
    """Start index of each group of sorted angles closer than ``tol``."""
    if angles.size == 0:
        return np.zeros(0, dtype=np.int64)
    new = np.empty(angles.size, dtype=bool)
    new[0] = True
    new[1:] = np.diff(angles) > tol
    return np.flatnonzero(new)


def critical_angles(u, v, fmt: MxFormat = MXFP4) -> np.ndarray:
    """Sorted angles in ``[0, 2 pi)`` where rotating columns ``(u, v)`` moves
    some magnitude across a decision boundary, deduplicated within 1e-12."""
    angles = np.sort(_event_angles(u, v, fmt)[0])
    out = angles[_group_sorted(angles)]
    if out.size > 1 and out[0] + TWO_PI - out[-1] <= ANGLE_DEDUP:
        out = out[:-1]
    return out


def _other_counts(z, pair, fmt):
    mask = np.ones(z.shape[1], dtype=bool)
    mask[list(pair)] = False
    return _counts(z[:, mask], fmt)


def _rotated_counts(u, v, theta, fmt):
    """Bin counts of the two rotated columns, one row per angle."""
    J = fmt.J
    th = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    out = np.empty((th.size, J), dtype=np.int64)
    # bound the (angles x rows) temporaries to a few MB
    step = max(1, 200_000 // max(1, u.size))
    for a in range(0, th.size, step):
        t = th[a : a + step, None]
        c, s = np.cos(t), np.sin(t)
        bins = np.concatenate([bin_index(c * u + s * v, fmt), bin_index(c * v - s * u, fmt)], axis=1)
        bins += J * np.arange(bins.shape[0])[:, None]
        out[a : a + step] = np.bincount(bins.ravel(), minlength=bins.shape[0] * J).reshape(-1, J)
    return out


def pair_counts(z, pair, theta, fmt: MxFormat = MXFP4):
    """Pooled bin counts of ``z`` after rotating columns ``pair`` by ``theta``.

    ``theta`` may be an array; the result then has one row per angle.
    """
    z = np.asarray(z, dtype=np.float64)
    p, q = pair
    out = _other_counts(z, pair, fmt) + _rotated_counts(z[:, p], z[:, q], theta, fmt)
    return out if np.ndim(theta) else out[0]


def _quarter_events(u, v, fmt):
    # Rotating by pi/2 swaps the two axes up to sign, so the pooled counts
    # are pi/2-periodic and one "up" and one "down" crossing per
    # (row, boundary) describe a full period.
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    rr, dd = np.broadcast_arrays(r[:, None], fmt.boundaries[None, :])
    ok = rr >= dd
    rows, lower = np.nonzero(ok)
    alpha = np.arccos(np.minimum(dd[ok] / rr[ok], 1.0))
    ph = phi[rows]
    angles = np.mod(np.concatenate([ph - alpha, ph + alpha]), QUARTER)
    angles[angles >= QUARTER] = 0.0
    direction = np.repeat(np.array([1, -1], dtype=np.int32), lower.size)
    return angles, np.concatenate([lower, lower]), direction


def best_angle(z, pair, fmt: MxFormat = MXFP4, sample_rows=None):
    """Globally optimal Givens angle for rotating columns ``pair`` of ``z``.

    Parameters
    ----------
    z : ndarray, (N, K)
        Normalized, currently rotated blocks.
    pair : (int, int)
    fmt : MxFormat
    sample_rows : array of int, optional
        Rows whose critical angles are enumerated. By default all rows are
        used and the loss of every interval comes from an incremental sweep
        over the boundary crossings. With a subset, each candidate is scored
        directly on all rows.

    Returns
    -------
    theta : float
        Minimizing angle in ``[0, pi/2)`` (the loss has period ``pi/2``).
        Zero unless some angle strictly improves the pooled loss; ties go
        to the smallest angle.
    loss : float
        Pooled ``L_code`` of ``z`` rotated by ``theta``.
    """
    z = np.asarray(z, dtype=np.float64)
    p, q = pair
    return _solve_pair(z[:, p], z[:, q], _other_counts(z, pair, fmt), z.size, fmt, sample_rows)


def _solve_pair(u, v, base, total, fmt, sample_rows=None):
    current = float(loss_from_counts(base + _rotated_counts(u, v, 0.0, fmt)[0], total))
    if not (np.any(u) or np.any(v)):
        return 0.0, current
    rows = slice(None) if sample_rows is None else np.asarray(sample_rows)
    angles, lower, direction = _quarter_events(u[rows], v[rows], fmt)
    if angles.size == 0:
        return 0.0, current
    # events sharing an angle group are applied together, so tie order is irrelevant
    order = np.argsort(angles)
    angles = angles[order]
    starts = _group_sorted(angles)
    tau = angles[starts]
    nxt = np.append(tau[1:], tau[0] + QUARTER)
    mids = np.mod(0.5 * (tau + nxt), QUARTER)
    if sample_rows is None:
        ref = mids[-1]
        lower, direction = lower[order], direction[order]
        n = angles.size
        delta = np.zeros((fmt.J, n), dtype=np.int32)
        idx = np.arange(n)
        delta[lower, idx] = -direction
        delta[lower + 1, idx] = direction
        ends = np.append(starts[1:], n) - 1
        states = np.cumsum(delta, axis=1)[:, ends].T
        losses = loss_from_counts(states + (base + _rotated_counts(u, v, ref, fmt)[0]), total)
    else:
        losses = loss_from_counts(_rotated_counts(u, v, mids, fmt) + base, total)
    cand = np.concatenate([[0.0], mids])
    vals = np.concatenate([[current], losses])
    theta = float(cand[np.lexsort((cand, vals))[0]])
    if theta == 0.0:
        return 0.0, current
    loss = float(loss_from_counts(base + _rotated_counts(u, v, theta, fmt)[0], total))
    if not loss < current:
        # sweep and direct evaluation disagree only through rounding; stay put
        return 0.0, current
    return theta, loss


def _givens_cols(m, p, q, theta):
    c, s = np.cos(theta), np.sin(theta)
    mp, mq = m[:, p].copy(), m[:, q].copy()
    m[:, p] = c * mp + s * mq
    m[:, q] = -s * mp + c * mq


def r_step(normalized, rot, cfg: IntraConfig | None = None, fmt: MxFormat = MXFP4, rng=None):
    """One R-step on scale-normalized (unrotated) blocks.

    Returns ``(matrix, loss_before, loss_after, applied)`` where ``applied``
    lists ``(p, q, theta)`` for each pair solved. The columns of the
    rotated blocks are refreshed after every pair, so later pairs see
    earlier rotations.
    """
    cfg = cfg or IntraConfig()
    R = np.array(rot.matrix if isinstance(rot, IntraRotation) else rot, dtype=np.float64)
    z = np.asarray(normalized, dtype=np.float64) @ R
    before = code_loss(z, fmt)
    _, P = cfg.resolve(z.shape[1])
    if P == 0:
        return R, before, before, []
    bins = bin_index(z, fmt)
    col_counts = np.stack([np.bincount(bins[:, k], minlength=fmt.J) for k in range(z.shape[1])])
    pairs = select_pairs(col_counts / z.shape[0], cfg)
    total_counts = col_counts.sum(axis=0)
    applied = []
    loss = before
    for p, q in pairs:
        sample = None
        if cfg.angle_sample_blocks is not None and cfg.angle_sample_blocks < z.shape[0]:
            rng = rng if rng is not None else np.random.default_rng(cfg.seed)
            sample = np.sort(rng.choice(z.shape[0], cfg.angle_sample_blocks, replace=False))
        base = total_counts - col_counts[p] - col_counts[q]
        theta, _ = _solve_pair(z[:, p], z[:, q], base, z.size, fmt, sample)
        if theta != 0.0:
            zp, zq = z[:, p].copy(), z[:, q].copy()
            _givens_cols(z, p, q, theta)
            cp = np.bincount(bin_index(z[:, p], fmt), minlength=fmt.J)
            cq = np.bincount(bin_index(z[:, q], fmt), minlength=fmt.J)
            new = float(loss_from_counts(base + cp + cq, z.size))
            if new < loss:
                _givens_cols(R, p, q, theta)
                col_counts[p], col_counts[q] = cp, cq
                total_counts = base + cp + cq
                loss = new
            else:
                z[:, p], z[:, q] = zp, zq
                theta = 0.0
        applied.append((p, q, theta))
    return R, before, loss, applied


def build_intra_rotation(data, cfg: IntraConfig | None = None, fmt: MxFormat = MXFP4) -> IntraRotation:
    """Alternate S-steps and R-steps on the ``(N, K)`` block matrix ``data``.

    Stops after ``max_iter`` rounds or once an R-step improves the loss by
    no more than ``epsilon``. The rotation with the lowest post-R-step loss
    is returned together with the S-step scales it induces.
    """
    cfg = cfg or IntraConfig()
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise InvalidInput(f"expected an (N, K>=2) matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("data contains non-finite values")
    K = x.shape[1]
    rng = np.random.default_rng(cfg.seed)
    R = np.eye(K)
    trace, pre, applied = [], [], []
    best_R, best_loss = R, np.inf
    for _ in range(cfg.max_iter):
        scales = s_step(x, R, fmt, cfg.pow2_mode).scales
        xn = x / scales[:, None]
        R, before, after, steps = r_step(xn, R, cfg, fmt, rng)
        if not trace:
            trace.append(before)
        pre.append(before)
        trace.append(after)
        applied.append(tuple(steps))
        if after < best_loss:
            best_R, best_loss = R, after
        if not before - after > cfg.epsilon:
            break
    final = s_step(x, best_R, fmt, cfg.pow2_mode)
    return IntraRotation(best_R, tuple(trace), final, tuple(pre), tuple(applied))
