import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from torq.errors import InvalidInput
from torq.formats import MXFP4, MXINT4, occupancy_histogram
from torq.intra import (
    IntraConfig,
    ScaleVector,
    best_angle,
    build_intra_rotation,
    code_loss,
    complementarity,
    critical_angles,
    imbalance_score,
    occupancy_state,
    pair_counts,
    r_step,
    s_step,
    select_pairs,
)
from torq.intra import loss_from_counts


def grid_losses(z, pair, n=4096, fmt=MXFP4):
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return th, loss_from_counts(pair_counts(z, pair, th, fmt), z.size)


def two_pass_loss(z, fmt=MXFP4):
    counts = np.zeros(fmt.J)
    for v in np.abs(z).ravel():
        j = 0
        while j < fmt.J - 1 and v > fmt.boundaries[j]:
            j += 1
        counts[j] += 1
    p = counts / z.size
    return sum((pj - 1 / fmt.J) ** 2 for pj in p)


def test_code_loss_examples():
    assert code_loss(np.full((3, 4), 0.1)) == pytest.approx(0.875, abs=1e-15)
    assert code_loss(np.array([[0, 0.5, 1, 1.5], [2, 3, 4, 6]])) == 0.0
    z = np.random.default_rng(0).standard_normal((20, 8)) * 2
    assert code_loss(z) == pytest.approx(two_pass_loss(z), abs=1e-12)
    with pytest.raises(InvalidInput):
        code_loss(np.zeros((0, 4)))


@pytest.mark.parametrize(
    "block_max, expected", [(6.0, 1.0), (12.0, 2.0), (0.0, 1.0), (3.0, 0.5), (47.0, 8.0)]
)
def test_s_step(block_max, expected):
    data = np.zeros((1, 4))
    data[0, 1] = block_max
    assert s_step(data).scales[0] == expected


def test_s_step_applies_rotation():
    data = np.array([[7.0, 7.0]])
    r = np.array([[1, -1], [1, 1]]) / np.sqrt(2)
    assert s_step(data).scales[0] == 1.0
    assert s_step(data, r).scales[0] == 2.0  # max 9.9, ratio 1.65


def test_scale_vector_validation():
    with pytest.raises(InvalidInput):
        ScaleVector(np.array([1.0, 3.0]))
    with pytest.raises(InvalidInput):
        ScaleVector(np.array([0.0]))


def test_imbalance_and_complementarity():
    u = np.full(8, 1 / 8)
    point = np.eye(8)[0]
    assert imbalance_score(u) == 0.0
    assert imbalance_score(point) == pytest.approx(0.875)
    assert complementarity(point, point) == pytest.approx(-0.875)
    assert complementarity(u, u) == 0.0
    # point masses in the first and last bins: -(7/8*-1/8 + -1/8*7/8 + 6*1/64)
    assert complementarity(point, np.eye(8)[7]) == pytest.approx(1 / 8)


@given(st.lists(st.floats(0, 1), min_size=8, max_size=8).filter(lambda v: sum(v) > 0))
def test_imbalance_bounded(v):
    h = np.array(v) / sum(v)
    assert imbalance_score(h) <= 7 / 8 + 1e-12


def test_select_pairs_ties_by_index():
    hists = np.full((8, 8), 1 / 8)
    assert select_pairs(hists) == [(0, 1), (2, 3)]


def test_select_pairs_prefers_complementary_point_masses():
    hists = np.full((8, 8), 1 / 8)
    hists[5] = np.eye(8)[0]
    hists[2] = np.eye(8)[7]
    pairs = select_pairs(hists)
    assert pairs[0] == (2, 5)


@given(st.integers(0, 1000), st.integers(2, 16))
@settings(max_examples=40, deadline=None)
def test_select_pairs_contract(seed, K):
    rng = np.random.default_rng(seed)
    hists = rng.dirichlet(np.ones(8), size=K)
    cfg = IntraConfig()
    _, P = cfg.resolve(K)
    pairs = select_pairs(hists, cfg)
    flat = [c for p in pairs for c in p]
    assert len(pairs) <= P and len(set(flat)) == len(flat)


def test_critical_angles_single_point():
    a = np.arccos(0.75)
    ang = critical_angles(np.array([1.0]), np.array([0.0]))
    for t in (a, 2 * np.pi - a, np.pi - a, np.pi + a, np.pi / 2 - a, np.pi / 2 + a):
        assert np.min(np.abs(ang - t)) < 1e-12
    assert np.all((ang >= 0) & (ang < 2 * np.pi)) and np.all(np.diff(ang) > 0)


def test_critical_angles_empty_when_small():
    assert critical_angles(np.array([0.1, 0.0]), np.array([0.1, 0.2])).size == 0


def test_loss_constant_between_critical_angles():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((12, 4)) * 2
    ang = critical_angles(z[:, 0], z[:, 1])
    ends = np.append(ang[1:], ang[0] + 2 * np.pi)
    probes = ang[:, None] + (ends - ang)[:, None] * np.linspace(0.1, 0.9, 5)[None, :]
    counts = pair_counts(z, (0, 1), probes.ravel()).reshape(len(ang), 5, -1)
    assert np.all(counts == counts[:, :1, :])


def test_grid_only_changes_at_critical_angles():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((10, 3)) * 2
    th, losses = grid_losses(z, (0, 2))
    ang = critical_angles(z[:, 0], z[:, 2])
    for a in np.flatnonzero(np.diff(losses) != 0):
        assert np.any((ang > th[a] - 1e-12) & (ang <= th[a + 1] + 1e-12))


@pytest.mark.parametrize("seed", range(10))
def test_best_angle_beats_dense_grid(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((32, 8)) * rng.uniform(0.5, 3)
    pair = tuple(sorted(rng.choice(8, 2, replace=False)))
    theta, loss = best_angle(z, pair)
    _, grid = grid_losses(z, pair, 8192)
    assert loss <= grid.min() + 1e-12
    assert 0 <= theta < np.pi / 2
    direct = loss_from_counts(pair_counts(z, pair, theta), z.size)
    assert loss == direct


def test_best_angle_uniform_matrix():
    z = np.tile(MXFP4.codewords, (4, 1))
    _, loss = best_angle(z, (0, 1))
    assert loss == 0.0


def test_best_angle_zero_pair():
    z = np.random.default_rng(0).standard_normal((8, 4))
    z[:, :2] = 0
    assert best_angle(z, (0, 1)) == (0.0, code_loss(z))


def test_best_angle_subsample_never_worse():
    rng = np.random.default_rng(9)
    z = rng.standard_normal((200, 6)) * 2
    _, full = best_angle(z, (1, 4))
    theta, sub = best_angle(z, (1, 4), sample_rows=np.arange(0, 200, 7))
    assert full <= sub <= code_loss(z)


def test_r_step_p_zero_is_identity():
    z = np.random.default_rng(1).standard_normal((30, 8))
    R, before, after, applied = r_step(z, np.eye(8), IntraConfig(pairs_per_step=0))
    assert np.array_equal(R, np.eye(8)) and before == after and applied == []


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_r_step_monotone(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((40, 8)) * rng.uniform(0.3, 4)
    R, before, after, _ = r_step(z, np.eye(8))
    assert after <= before
    assert after == code_loss(z @ R)
    np.testing.assert_allclose(R.T @ R, np.eye(8), atol=1e-12)


def test_r_step_matches_grid_search_on_same_pairs():
    rng = np.random.default_rng(21)
    z = rng.standard_normal((16, 4)) * 2
    R, _, after, applied = r_step(z, np.eye(4))
    w = z.copy()
    for p, q, _ in applied:
        th, losses = grid_losses(w, (p, q), 8192)
        t = th[np.argmin(losses)]
        c, s = np.cos(t), np.sin(t)
        w[:, p], w[:, q] = c * w[:, p] + s * w[:, q], -s * w[:, p] + c * w[:, q]
    assert after <= code_loss(w) + 1e-9


def test_build_intra_uniform_input_stays_identity():
    z = np.tile(MXFP4.codewords, (6, 1))
    rot = build_intra_rotation(z)
    assert np.array_equal(rot.matrix, np.eye(8))
    assert all(v == rot.loss_trace[0] for v in rot.loss_trace)


def test_build_intra_lognormal_improves():
    rng = np.random.default_rng(42)
    x = np.exp(rng.standard_normal((64 * 8, 32))) * np.where(rng.random((64 * 8, 32)) < 0.5, -1, 1)
    rot = build_intra_rotation(x)
    assert rot.loss_trace[-1] < rot.loss_trace[0]
    for pre, post in zip(rot.pre_r_losses, rot.loss_trace[1:]):
        assert post <= pre
    R = rot.matrix
    np.testing.assert_allclose(R.T @ R, np.eye(32), atol=1e-10)
    assert abs(abs(np.linalg.det(R)) - 1) < 1e-9
    np.testing.assert_array_equal(rot.final_scales.scales, s_step(x, R).scales)


def test_other_formats_work():
    z = np.random.default_rng(2).standard_normal((64, 8))
    rot = build_intra_rotation(z, IntraConfig(max_iter=3), MXINT4)
    assert rot.loss_trace[-1] <= rot.loss_trace[0]


def test_occupancy_state():
    z = np.random.default_rng(3).standard_normal((50, 4))
    st_ = occupancy_state(z)
    np.testing.assert_allclose(st_.per_column_hist.sum(1), 1, atol=1e-12)
    np.testing.assert_allclose(st_.global_hist, occupancy_histogram(z), atol=1e-15)
    assert st_.loss == pytest.approx(code_loss(z), abs=1e-15)


def test_single_column_imbalance_equals_code_loss():
    col = np.random.default_rng(5).standard_normal((30, 1))
    assert imbalance_score(occupancy_histogram(col)) == pytest.approx(code_loss(col), abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        IntraConfig(max_iter=0)
    with pytest.raises(ValueError):
        IntraConfig(lam=0)
    with pytest.raises(ValueError):
        IntraConfig(pow2_mode="nearest")
    with pytest.raises(ValueError):
        IntraConfig(pairs_per_step=9).resolve(32)
    assert IntraConfig().resolve(32) == (16, 8)
