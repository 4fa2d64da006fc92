import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from torq.errors import InvalidInput, InvalidScale
from torq.formats import (
    MXFP4,
    MXINT4,
    NVFP4,
    bin_index,
    block_scales,
    default_scale,
    get_format,
    occupancy_histogram,
    pow2_floor,
    pow2_round,
    project_nearest,
    quantize_block,
    quantize_rows,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


def brute_nearest(v, fmt):
    # exhaustive search over the signed table; ties go to the smaller magnitude
    table = fmt.signed_codewords
    dist = np.abs(np.asarray(v)[..., None] - table)
    best = dist.min(axis=-1, keepdims=True)
    cand = np.where(dist == best, np.abs(table), np.inf)
    return table[np.argmin(cand, axis=-1)]


def test_mxfp4_codebook():
    np.testing.assert_array_equal(MXFP4.codewords, [0, 0.5, 1, 1.5, 2, 3, 4, 6])
    np.testing.assert_array_equal(MXFP4.boundaries, [0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5])
    assert MXFP4.J == 8 and MXFP4.c_max == 6.0 and MXFP4.delta_min == 0.5
    assert MXFP4.signed_codewords.size == 15


def test_format_lookup():
    assert get_format("MXFP4") is MXFP4
    assert get_format(MXINT4) is MXINT4
    with pytest.raises(InvalidInput):
        get_format("fp8")


@pytest.mark.parametrize("mx, expected", [(6.0, 4.0), (1.0, 1.0), (0.0, 1.0), (7.99, 4.0), (8.0, 8.0), (0.3, 0.25)])
def test_default_scale(mx, expected):
    block = np.zeros(32)
    block[3] = -mx
    assert default_scale(block) == expected


def test_default_scale_rejects_nonfinite():
    with pytest.raises(InvalidInput):
        default_scale(np.array([1.0, np.nan]))


@pytest.mark.parametrize(
    "rule, mx, expected",
    [("round", 6.0, 1.0), ("round", 12.0, 2.0), ("round", 8.4, 1.0), ("round", 8.6, 2.0),
     ("floor_aligned", 11.0, 1.0), ("ceil", 6.1, 2.0), ("ceil", 6.0, 1.0), ("real", 3.0, 0.5)],
)
def test_block_scale_rules(rule, mx, expected):
    assert block_scales(np.array([[mx, 0.0]]), MXFP4, rule)[0] == expected


def test_pow2_helpers_are_exact():
    x = np.array([1e-30, 0.7, 1.0, 1.41, 1.42, 3.0, 1e30])
    for f in (pow2_floor, pow2_round):
        m, _ = np.frexp(f(x))
        assert np.all(m == 0.5)
    np.testing.assert_array_equal(pow2_floor([0.0, 3.0, 4.0]), [1.0, 2.0, 4.0])
    np.testing.assert_array_equal(pow2_round([1.41, 1.42]), [1.0, 2.0])


@pytest.mark.parametrize("c", [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
def test_codewords_are_fixed_points(c):
    assert project_nearest(c) == c
    assert project_nearest(-c) == -c


def test_ties_go_to_smaller_magnitude():
    np.testing.assert_array_equal(project_nearest(MXFP4.boundaries), MXFP4.codewords[:-1])
    np.testing.assert_array_equal(project_nearest(-MXFP4.boundaries), -MXFP4.codewords[:-1])


@pytest.mark.parametrize("j", range(7))
def test_boundary_adjacency(j):
    d = MXFP4.boundaries[j]
    eps = 1e-9 * d
    assert project_nearest(d - eps) == MXFP4.codewords[j]
    assert project_nearest(d + eps) == MXFP4.codewords[j + 1]


def test_saturation():
    assert project_nearest(100.0) == 6.0
    assert project_nearest(-7.0) == -6.0


def test_negative_zero_collapses():
    out = project_nearest(np.array([-0.1, -0.0]))
    assert not np.any(np.signbit(out))


@pytest.mark.parametrize("fmt", [MXFP4, MXINT4, NVFP4])
def test_matches_exhaustive_search(fmt):
    rng = np.random.default_rng(7)
    v = rng.uniform(-1.2 * fmt.c_max, 1.2 * fmt.c_max, 10**5)
    np.testing.assert_array_equal(project_nearest(v, fmt), brute_nearest(v, fmt))


@given(st.lists(finite, min_size=1, max_size=64))
@settings(max_examples=200, deadline=None)
def test_quantize_block_is_nearest_and_idempotent(vals):
    block = np.array(vals)
    s = default_scale(block)
    q = quantize_block(block, s)
    np.testing.assert_array_equal(q.dequantized, s * brute_nearest(block / s, MXFP4))
    np.testing.assert_array_equal(quantize_block(q.dequantized, s).dequantized, q.dequantized)
    assert np.all(np.abs(q.dequantized) <= s * MXFP4.c_max)
    np.testing.assert_array_equal(MXFP4.signed_codewords[q.codes] * s, q.dequantized)


@given(st.sampled_from(list(MXFP4.signed_codewords)), st.integers(-20, 20))
def test_scaled_codeword_round_trip(c, e):
    s = 2.0**e
    q = quantize_block(np.full(4, s * c), s)
    np.testing.assert_array_equal(q.dequantized, s * c)


def test_quantize_block_errors():
    with pytest.raises(InvalidScale):
        quantize_block(np.ones(4), 0.0)
    with pytest.raises(InvalidScale):
        quantize_block(np.ones(4), -1.0)
    with pytest.raises(InvalidInput):
        quantize_block(np.array([1.0, np.inf]), 1.0)


def test_zero_block():
    q = quantize_block(np.zeros(8), 1.0)
    np.testing.assert_array_equal(q.dequantized, 0.0)


def test_outlier_block_zeroes_small_values():
    block = np.full(32, 0.1)
    block[0] = 6.0
    s = default_scale(block)
    assert s == 4.0
    q = quantize_block(block, s)
    np.testing.assert_array_equal(q.dequantized[1:], 0.0)


def test_quantize_rows_matches_blockwise():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((10, 32)) * 3
    scales = block_scales(rows)
    deq, codes = quantize_rows(rows, scales)
    for r in range(10):
        q = quantize_block(rows[r], scales[r])
        np.testing.assert_array_equal(deq[r], q.dequantized)
        np.testing.assert_array_equal(codes[r], q.codes)


@pytest.mark.parametrize(
    "values, expected",
    [
        ([0.5, 0.6, 0.7], [0, 1, 0, 0, 0, 0, 0, 0]),
        ([0, 0.5, 1, 1.5, 2, 3, 4, 6], [1 / 8] * 8),
        ([0.1, 0.6, 5.5], [1 / 3, 1 / 3, 0, 0, 0, 0, 0, 1 / 3]),
    ],
)
def test_occupancy_histogram(values, expected):
    np.testing.assert_allclose(occupancy_histogram(np.array(values)), expected, atol=1e-15)


def test_occupancy_histogram_empty():
    with pytest.raises(InvalidInput):
        occupancy_histogram(np.array([]))


@given(st.lists(finite, min_size=1, max_size=200))
def test_histogram_is_probability_vector(vals):
    h = occupancy_histogram(np.array(vals))
    assert np.all(h >= 0) and abs(h.sum() - 1) <= 1e-12


def test_bin_index_is_left_open():
    np.testing.assert_array_equal(bin_index(np.array([0.25, 0.2500001, 5.0, 5.0001])), [0, 1, 6, 7])


def test_alt_formats():
    np.testing.assert_array_equal(MXINT4.codewords, np.arange(8) / 4)
    block = np.array([3.0, -1.0, 0.2, 0.0])
    # nvfp4 scale is the real ratio max / 6
    assert block_scales(block[None], NVFP4)[0] == 0.5
    q = quantize_block(block, 0.5, NVFP4)
    assert q.dequantized[0] == 3.0
