import numpy as np
import pytest
from fractions import Fraction

from perfcnn.core import ShapeError, SpatialIndexSet, direct_conv
from perfcnn.lowering import (count_mults, default_stack_factor, gather_rows, im2row, kernel_matrix,
                              matmul, stack_batch, unstack)


def naive_matmul(A, B):
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            for k in range(A.shape[1]):
                out[i, j] += A[i, k] * B[k, j]
    return out


def test_single_patch_is_flattened_input():
    U = np.arange(9, dtype=np.float32).reshape(3, 3, 1)
    M = im2row(U, 3)
    assert M.values.shape == (1, 9)
    np.testing.assert_array_equal(M.values[0], U.ravel())
    assert M.row_origin.tolist() == [[0, 1, 1]]


def test_row_layout_is_i_j_s():
    U = np.random.default_rng(0).standard_normal((4, 5, 2))
    M = im2row(U, 2, SpatialIndexSet((3, 4), [(2, 3)]))
    expect = [U[1 + i, 2 + j, s] for i in range(2) for j in range(2) for s in range(2)]
    np.testing.assert_array_equal(M.values[0], expect)


def test_one_position_one_row():
    U = np.random.default_rng(1).standard_normal((9, 9, 3))
    assert im2row(U, 3, SpatialIndexSet((7, 7), [(1, 1)])).rows == 1


def test_full_lowering_reproduces_direct_conv():
    rng = np.random.default_rng(2)
    U = rng.standard_normal((5, 5, 2))
    K = rng.standard_normal((3, 3, 2, 4))
    V = matmul(im2row(U, 3), kernel_matrix(K)).reshape(3, 3, 4)
    np.testing.assert_allclose(V, direct_conv(U, K), rtol=1e-12)


def test_rows_follow_position_order():
    rng = np.random.default_rng(3)
    U = rng.standard_normal((6, 6, 2))
    K = rng.standard_normal((3, 3, 2, 2))
    pos = SpatialIndexSet((4, 4), [(4, 4), (1, 2), (3, 1)])
    out = matmul(im2row(U, 3, pos), kernel_matrix(K))
    V = direct_conv(U, K)
    for row, (x, y) in zip(out, pos):
        np.testing.assert_allclose(row, V[x - 1, y - 1], rtol=1e-12)


def test_out_of_bounds_position_named():
    U = np.zeros((5, 5, 1))
    with pytest.raises(IndexError, match=r"\(4, 1\)"):
        im2row(U, 3, SpatialIndexSet((4, 4), [(1, 1), (4, 1)]))


def test_matmul_examples():
    assert not matmul(np.zeros((1, 9)), np.ones((9, 3))).any()
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((1, 9)), rng.standard_normal((9, 1))
    assert matmul(a, b)[0, 0] == pytest.approx(sum(a[0, k] * b[k, 0] for k in range(9)), rel=1e-12)
    A, B = rng.standard_normal((7, 12)).astype(np.float32), rng.standard_normal((12, 5)).astype(np.float32)
    np.testing.assert_allclose(matmul(A, B), naive_matmul(A.astype(np.float64), B.astype(np.float64)), rtol=1e-5,
                               atol=1e-5)
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 1)))


def test_gather_rows_batched_matches_single():
    rng = np.random.default_rng(5)
    U = rng.standard_normal((3, 7, 6, 2))
    flat = np.array([0, 7, 19])
    rows = gather_rows(U, 3, flat, (5, 4))
    for b in range(3):
        np.testing.assert_array_equal(rows[b], im2row(U[b], 3, SpatialIndexSet.from_flat((5, 4), flat)).values)


def test_stack_factor_default():
    assert default_stack_factor(0) == 1
    assert default_stack_factor(Fraction(1, 2)) == 2
    assert default_stack_factor(0.75) == 4
    assert default_stack_factor(Fraction(2, 3)) == 3
    with pytest.raises(ValueError):
        default_stack_factor(1)


def test_stack_factor_one_is_per_image():
    rng = np.random.default_rng(6)
    imgs = list(rng.standard_normal((3, 5, 5, 2)))
    mask = SpatialIndexSet((3, 3), [(1, 1), (2, 3)])
    groups = stack_batch(imgs, mask, 3, stack_factor=1)
    assert len(groups) == 3
    for g, u in zip(groups, imgs):
        np.testing.assert_array_equal(g.values, im2row(u, 3, mask).values)


def test_two_half_masks_fill_one_matrix():
    rng = np.random.default_rng(7)
    imgs = list(rng.standard_normal((2, 6, 6, 1)))
    full = SpatialIndexSet.full(4, 4)
    half = SpatialIndexSet.from_flat((4, 4), range(0, 16, 2))
    groups = stack_batch(imgs, half, 3)  # r = 1/2 -> two images per matrix
    assert len(groups) == 1 and groups[0].rows == len(full)
    assert groups[0].row_origin[:, 0].tolist() == [0] * 8 + [1] * 8


def test_stacked_products_unstack_to_per_image():
    rng = np.random.default_rng(8)
    imgs = list(rng.standard_normal((5, 6, 6, 2)))
    K = rng.standard_normal((3, 3, 2, 3))
    mask = SpatialIndexSet.from_flat((4, 4), [0, 5, 9, 15])
    groups = stack_batch(imgs, mask, 3)
    assert len(groups) == 2  # r = 3/4 -> 4 images per matrix
    per = unstack([matmul(g, kernel_matrix(K)) for g in groups], groups, 5)
    for u, block in zip(imgs, per):
        np.testing.assert_allclose(block, matmul(im2row(u, 3, mask), kernel_matrix(K)), rtol=1e-12)


def test_stack_batch_errors():
    with pytest.raises(ValueError):
        stack_batch([], SpatialIndexSet.full(2, 2), 3)
    with pytest.raises(ShapeError):
        stack_batch([np.zeros((4, 4, 1)), np.zeros((5, 4, 1))], SpatialIndexSet.full(2, 2), 3)
    with pytest.raises(ValueError):
        stack_batch([np.zeros((4, 4, 1))], SpatialIndexSet.full(2, 2), 3, stack_factor=0)


def test_count_mults():
    assert count_mults(3, 2, 4, 16) == 1152
    assert count_mults(3, 2, 4, 8) * 2 == count_mults(3, 2, 4, 16)
    assert Fraction(count_mults(5, 3, 7, 13), count_mults(5, 3, 7, 52)) == Fraction(13, 52)
    with pytest.raises(ValueError):
        count_mults(3, 0, 4, 16)
