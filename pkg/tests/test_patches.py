"""Patch extraction, accumulation and the mean-subtraction projector."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgcrf.errors import ParameterError
from dgcrf.patches import (
    accumulate_patches,
    center_rows,
    coverage_counts,
    extract_patches,
    gather_pixels,
    mean_projection,
    mean_subtract,
)


def test_extract_3x3_with_d2():
    img = np.arange(9, dtype=np.float64).reshape(3, 3)
    pset = extract_patches(img, 2)
    assert pset.n_patches == 4
    np.testing.assert_array_equal(pset.counts, [[1, 2, 1], [2, 4, 2], [1, 2, 1]])
    # anchors enumerate row-major
    np.testing.assert_array_equal(pset.patches[0], [0, 1, 3, 4])
    np.testing.assert_array_equal(pset.patches[1], [1, 2, 4, 5])
    np.testing.assert_array_equal(pset.patches[2], [3, 4, 6, 7])


def test_extract_single_patch_is_row_major_flatten():
    img = np.array([[0.1, 0.2], [0.3, 0.4]])
    pset = extract_patches(img, 2)
    assert pset.n_patches == 1
    np.testing.assert_array_equal(pset.patches[0], img.ravel())


def test_extract_patch_too_large():
    with pytest.raises(ParameterError):
        extract_patches(np.zeros((4, 4)), 5)


def test_interior_counts_are_d_squared():
    counts = coverage_counts(10, 12, 3)
    assert np.all(counts[2:-2, 2:-2] == 9)
    assert counts.sum() == 9 * 8 * 10


def test_accumulate_reproduces_count_weighted_image():
    rng = np.random.Generator(np.random.PCG64(1))
    img = rng.random((7, 9))
    for d in (2, 3, 4):
        pset = extract_patches(img, d)
        acc = accumulate_patches(pset.patches, 7, 9, d)
        # repeated addition of one double and multiplication by N agree only
        # to the last couple of bits; the reduction order itself is exact
        np.testing.assert_allclose(acc, img * pset.counts, rtol=1e-14, atol=0)
        np.testing.assert_array_equal(acc, accumulate_patches(pset.patches, 7, 9, d))


def test_accumulate_gather_adjoint():
    rng = np.random.Generator(np.random.PCG64(6))
    v = rng.standard_normal((24, 9))
    u = rng.standard_normal((6, 8))
    lhs = float(np.sum(accumulate_patches(v, 6, 8, 3) * u))
    rhs = float(np.sum(v * gather_pixels(u, 3)))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_gather_matches_extract():
    rng = np.random.Generator(np.random.PCG64(4))
    img = rng.random((6, 8))
    np.testing.assert_array_equal(gather_pixels(img, 3), extract_patches(img, 3).patches)


def test_mean_subtract_examples():
    centered, mean = mean_subtract(np.array([1.0, 1.0, 1.0, 1.0]))
    np.testing.assert_array_equal(centered, np.zeros(4))
    assert mean == 1.0

    centered, mean = mean_subtract(np.array([1.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(centered, [0.75, -0.25, -0.25, -0.25], atol=1e-15)
    assert mean == 0.25

    again, _ = mean_subtract(centered)
    np.testing.assert_allclose(again, centered, atol=1e-15)


def test_center_rows_matches_scalar_mean_subtract():
    rng = np.random.Generator(np.random.PCG64(8))
    rows = rng.random((12, 9))
    centered = center_rows(rows)
    for i in range(12):
        np.testing.assert_allclose(centered[i], mean_subtract(rows[i])[0], atol=1e-15)


@settings(max_examples=60)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_projection_laws(d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    g = mean_projection(d)
    p = rng.standard_normal(d * d)
    gp = g @ p
    assert np.max(np.abs(g @ gp - gp)) < 1e-12
    assert abs(gp.sum()) < 1e-10
    np.testing.assert_allclose(g, g.T, atol=1e-15)
    np.testing.assert_allclose(g @ np.ones(d * d), 0.0, atol=1e-12)
