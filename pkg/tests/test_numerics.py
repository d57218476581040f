import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from advforge import numerics


def _mp_residuals(a, p):
    """Relative residuals of the four Moore-Penrose conditions."""
    scale = max(np.abs(a).max(), 1e-300)
    pscale = max(np.abs(p).max(), 1e-300)
    return (
        np.abs(a @ p @ a - a).max() / scale,
        np.abs(p @ a @ p - p).max() / pscale,
        np.abs((a @ p).T - a @ p).max(),
        np.abs((p @ a).T - p @ a).max(),
    )


def test_matmul_against_scalar_expansion():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expect = np.array([[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
    np.testing.assert_allclose(numerics.matmul(a, b), expect, rtol=1e-14)


def test_matvec_identity_and_scalar():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(numerics.matvec(np.eye(3), x), x)
    assert numerics.matmul([[2.0]], [[3.0]])[0, 0] == 6.0
    np.testing.assert_array_equal(numerics.transpose([[1.0, 2.0]]), [[1.0], [2.0]])


def test_dimension_mismatch_and_non_finite():
    with pytest.raises(numerics.InvalidInputError):
        numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(numerics.InvalidInputError):
        numerics.matvec(np.ones((2, 3)), np.ones(2))
    with pytest.raises(numerics.InvalidInputError):
        numerics.pinv([[1.0, np.nan]])


def test_svd_sorted_orthonormal_and_reconstructs():
    a = np.random.default_rng(2).normal(size=(6, 9))
    r = numerics.svd(a)
    assert np.all(np.diff(r.singular_values) <= 0)
    np.testing.assert_allclose(r.u.T @ r.u, np.eye(6), atol=1e-8)
    np.testing.assert_allclose(r.vt @ r.vt.T, np.eye(6), atol=1e-8)
    np.testing.assert_allclose(r.u * r.singular_values @ r.vt, a, atol=1e-12)


def test_pinv_small_cases():
    np.testing.assert_allclose(numerics.pinv(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(numerics.pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-15)
    np.testing.assert_array_equal(numerics.pinv(np.zeros((2, 5))), np.zeros((5, 2)))


def test_pinv_wide_matrix_reconstruction():
    a = np.random.default_rng(3).normal(size=(10, 784))
    p = numerics.pinv(a)
    assert np.abs(a @ p @ a - a).max() <= 1e-8 * np.abs(a).max()


def test_pinv_batched_matches_loop():
    a = np.random.default_rng(4).normal(size=(5, 3, 7))
    batched = numerics.pinv(a)
    for i in range(5):
        np.testing.assert_allclose(batched[i], numerics.pinv(a[i]), atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 20),
    cols=st.integers(1, 60),
    rank=st.integers(1, 20),
    seed=st.integers(0, 2**31 - 1),
)
def test_pinv_moore_penrose_conditions(rows, cols, rank, seed):
    rng = np.random.default_rng(seed)
    rank = min(rank, rows, cols)
    a = rng.normal(size=(rows, rank)) @ rng.normal(size=(rank, cols))
    p = numerics.pinv(a)
    assert p.shape == (cols, rows)
    for r in _mp_residuals(a, p):
        assert r <= 1e-8


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_pinv_moore_penrose_at_largest_size(seed):
    a = np.random.default_rng(seed).normal(size=(20, 800))
    for r in _mp_residuals(a, numerics.pinv(a)):
        assert r <= 1e-8


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_pinv_is_an_involution_on_full_rank(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n + 3))
    np.testing.assert_allclose(numerics.pinv(numerics.pinv(a)), a, atol=1e-8 * np.abs(a).max())


def test_kmeans_single_center_is_mean():
    cm = numerics.kmeans([[0.0, 0.0], [2.0, 2.0]], 1)
    np.testing.assert_allclose(cm.centers, [[1.0, 1.0]])
    assert cm.k == 1


def test_kmeans_two_blobs_against_brute_force():
    rng = np.random.default_rng(5)
    pts = np.concatenate([rng.uniform(-0.1, 0.1, (6, 2)), 10 + rng.uniform(-0.1, 0.1, (6, 2))])
    # brute force over every 2-partition for the optimal inertia
    best = np.inf
    for mask in itertools.product([0, 1], repeat=len(pts)):
        m = np.array(mask, bool)
        if m.all() or not m.any():
            continue
        inertia = sum(((pts[s] - pts[s].mean(0)) ** 2).sum() for s in (m, ~m))
        best = min(best, inertia)
    cm = numerics.kmeans(pts, 2, seed=0)
    assert cm.inertia == pytest.approx(best, rel=1e-9)
    centers = cm.centers[np.argsort(cm.centers[:, 0])]
    assert np.abs(centers[0]).max() < 0.2
    assert np.abs(centers[1] - 10).max() < 0.2


def test_kmeans_k_equals_points():
    pts = np.array([[0.0], [1.0], [5.0]])
    cm = numerics.kmeans(pts, 3, seed=1)
    np.testing.assert_allclose(np.sort(cm.centers[:, 0]), [0.0, 1.0, 5.0])
    assert cm.inertia == 0.0


def test_kmeans_errors():
    with pytest.raises(numerics.InvalidInputError):
        numerics.kmeans([[0.0], [0.0]], 2)
    with pytest.raises(numerics.InvalidInputError):
        numerics.kmeans(np.zeros((0, 2)), 1)


def test_kmeans_deterministic_and_nearest_ties():
    pts = np.random.default_rng(6).normal(size=(200, 3))
    a = numerics.kmeans(pts, 4, seed=9)
    b = numerics.kmeans(pts, 4, seed=9)
    assert np.array_equal(a.centers, b.centers)
    tie = numerics.ClusterModel(np.array([[1.0], [-1.0]]), 0.0)
    assert tie.nearest([[0.0]])[0] == 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 5))
def test_kmeans_inertia_non_increasing(seed, k):
    pts = np.random.default_rng(seed).normal(size=(60, 2))
    trace = np.array(numerics.kmeans(pts, k, seed=seed).inertia_trace)
    assert np.all(np.diff(trace) <= 1e-9 * (1 + trace[:-1]))


def test_tv_constant_image_unchanged():
    img = np.full((8, 8), 0.3)
    np.testing.assert_allclose(numerics.tv_denoise(img, 0.5), img, atol=1e-15)


def test_tv_huge_fidelity_is_identity():
    img = np.random.default_rng(7).uniform(size=(10, 10))
    assert np.abs(numerics.tv_denoise(img, 1e9) - img).max() <= 1e-4


def test_tv_checkerboard_reduced():
    board = np.where((np.add.outer(np.arange(8), np.arange(8)) % 2) == 0, 1.0, -1.0)
    out = numerics.tv_denoise(board, 1.0)
    assert numerics.total_variation(out) < numerics.total_variation(board)


def test_tv_batched_and_errors():
    imgs = np.random.default_rng(8).uniform(size=(3, 1, 6, 6))
    out = numerics.tv_denoise(imgs, 2.0)
    np.testing.assert_allclose(out[1, 0], numerics.tv_denoise(imgs[1, 0], 2.0), atol=1e-14)
    with pytest.raises(numerics.InvalidInputError):
        numerics.tv_denoise(imgs, 0.0)
    with pytest.raises(numerics.InvalidInputError):
        numerics.tv_denoise(np.ones(4))


@settings(max_examples=30, deadline=None)
@given(
    img=hnp.arrays(np.float64, (7, 9), elements=st.floats(-3, 3)),
    fidelity=st.floats(0.05, 1.0),
)
def test_tv_never_increases_variation_for_small_fidelity(img, fidelity):
    out = numerics.tv_denoise(img, fidelity)
    assert np.all(np.isfinite(out))
    assert numerics.total_variation(out) <= numerics.total_variation(img) + 1e-9


def test_pure_functions_bit_identical():
    a = np.random.default_rng(10).normal(size=(4, 30))
    assert numerics.pinv(a).tobytes() == numerics.pinv(a.copy()).tobytes()
    img = np.random.default_rng(11).uniform(size=(12, 12))
    assert numerics.tv_denoise(img).tobytes() == numerics.tv_denoise(img.copy()).tobytes()
