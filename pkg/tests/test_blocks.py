import numpy as np
import pytest
from scipy.stats import ortho_group

from torq.blocks import BlockShape, BlockTensor, block_variances, estimate_covariances, reshape_tokens
from torq.errors import InvalidInput, ShapeError


def test_layout():
    bt = reshape_tokens(np.array([[1.0, 2, 3, 4]]), BlockShape(2, 2))
    np.testing.assert_array_equal(bt.samples[0], [[1, 2], [3, 4]])


def test_reshape_flatten_round_trip():
    x = np.random.default_rng(1).standard_normal((5, 24))
    bt = reshape_tokens(x, BlockShape(3, 8))
    assert bt.flatten().tobytes() == x.tobytes()
    assert bt.stacked().shape == (15, 8)


@pytest.mark.parametrize("B, K", [(1, 4), (4, 1), (0, 0)])
def test_degenerate_shape(B, K):
    with pytest.raises(ShapeError):
        BlockShape(B, K)


def test_reshape_wrong_width():
    with pytest.raises(ShapeError):
        reshape_tokens(np.zeros((2, 7)), BlockShape(2, 4))


def test_tensor_validation():
    with pytest.raises(InvalidInput):
        BlockTensor(BlockShape(2, 2), np.full((1, 2, 2), np.nan))
    bt = BlockTensor(BlockShape(2, 2), np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        bt.samples[0, 0, 0] = 1.0


def test_covariance_outer_product():
    x = np.zeros((1, 3, 2))
    x[0, 0, 1] = 1.0
    cov = estimate_covariances(BlockTensor(BlockShape(3, 2), x), ridge=0.0)
    expected = np.zeros((3, 3))
    expected[0, 0] = 1.0
    np.testing.assert_array_equal(cov.per_position[1], expected)
    np.testing.assert_array_equal(cov.per_position[0], 0.0)


def test_ridge_adds_exactly():
    x = np.random.default_rng(2).standard_normal((4, 3, 2))
    bt = BlockTensor(BlockShape(3, 2), x)
    a = estimate_covariances(bt, 0.0)
    b = estimate_covariances(bt, 1e-8)
    np.testing.assert_array_equal(np.diagonal(b.per_position, axis1=1, axis2=2),
                                  np.diagonal(a.per_position, axis1=1, axis2=2) + 1e-8)


def test_covariance_against_loop_oracle():
    rng = np.random.default_rng(3)
    T, B, K = 7, 5, 4
    x = rng.standard_normal((T, B, K))
    cov = estimate_covariances(BlockTensor(BlockShape(B, K), x), ridge=0.0)
    for k in range(K):
        naive = np.zeros((B, B))
        for t in range(T):
            for i in range(B):
                for j in range(B):
                    naive[i, j] += x[t, i, k] * x[t, j, k]
        np.testing.assert_allclose(cov.per_position[k], naive / T, rtol=1e-12)
    np.testing.assert_allclose(cov.pooled, cov.per_position.mean(axis=0), rtol=1e-12)


def test_covariance_permutation_invariant():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((20, 4, 3))
    a = estimate_covariances(BlockTensor(BlockShape(4, 3), x))
    b = estimate_covariances(BlockTensor(BlockShape(4, 3), x[rng.permutation(20)]))
    np.testing.assert_allclose(a.per_position, b.per_position, rtol=1e-12, atol=1e-15)


def test_covariance_symmetric_psd_and_trace_invariant():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 6, 4))
    cov = estimate_covariances(BlockTensor(BlockShape(6, 4), x))
    Q = ortho_group.rvs(6, random_state=5)
    for s in cov.per_position:
        np.testing.assert_allclose(s, s.T, rtol=1e-10)
        assert np.linalg.eigvalsh(s).min() >= -1e-8 * np.trace(s)
        assert abs(np.trace(Q @ s @ Q.T) - np.trace(s)) <= 1e-9 * np.trace(s)


def test_block_variances():
    x = np.zeros((2, 2, 2))
    x[1, 0] = [3.0, 4.0]
    bv = block_variances(BlockTensor(BlockShape(2, 2), x))
    np.testing.assert_array_equal(bv, [[0, 0], [25, 0]])
    y = np.random.default_rng(6).standard_normal((3, 4, 5))
    np.testing.assert_allclose(block_variances(BlockTensor(BlockShape(4, 5), y)), (y**2).sum(-1), rtol=1e-14)
