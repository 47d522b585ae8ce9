import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdflow.core import DegenerateVectorError, RngStream, cosine_similarity, knn, pca_basis, project_affine

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def test_cosine_known_values():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([2, 0], [5, 0]) == pytest.approx(1.0)
    assert cosine_similarity([1, 1], [-1, -1]) == pytest.approx(-1.0)


def test_cosine_rejects_zero_and_mismatch():
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0, 0], [1, 0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_bounded_and_symmetric(a, b):
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    s = cosine_similarity(a, b)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12
    assert s == pytest.approx(cosine_similarity(b, a), abs=1e-12)


def test_knn_orders_by_similarity_and_breaks_ties_low_index():
    data = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [1.0, 1.0]])
    assert list(knn([1.0, 0.0], data, 3)) == [0, 2, 3]
    assert list(knn([1.0, 0.0], data, 3, metric="euclidean")) == [0, 2, 3]


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.integers(1, 40), st.sampled_from(["cosine", "euclidean"]))
def test_knn_matches_full_stable_sort(seed, n, metric):
    r = RngStream(seed)
    # small integer entries produce many exact ties
    data = r.integers(-2, 3, size=(n, 3)).astype(float)
    data[np.all(data == 0, axis=1)] = 1.0
    q = r.integers(-2, 3, size=3).astype(float) + 0.5
    k = int(r.integers(1, n + 1))
    if metric == "cosine":
        sims = data @ q / (np.linalg.norm(data, axis=1) * np.linalg.norm(q))
    else:
        sims = -np.linalg.norm(data - q, axis=1)
    assert list(knn(q, data, k, metric)) == list(np.argsort(-sims, kind="stable")[:k])
    if metric == "cosine":
        assert list(knn(q, data, k, metric, np.linalg.norm(data, axis=1))) == list(knn(q, data, k, metric))


def test_knn_k_out_of_range():
    with pytest.raises(ValueError):
        knn([1.0, 0.0], np.eye(2), 3)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 6))
def test_projection_idempotent_and_orthogonal(seed, n, d_extra):
    r = RngStream(seed)
    d = 2 + d_extra
    pts = r.normal(size=(n, d))
    b = pca_basis(pts, 0.9)
    z = r.normal(size=d) * 3
    p = project_affine(z, b)
    assert np.allclose(project_affine(p, b), p, atol=1e-10)
    if b.rank:
        assert np.max(np.abs(b.basis.T @ (z - p))) < 1e-8
    # projection onto an affine set never increases distance between points
    z2 = r.normal(size=d)
    assert np.linalg.norm(p - project_affine(z2, b)) <= np.linalg.norm(z - z2) + 1e-10


def test_zero_variance_gives_rank_zero_and_projects_to_mean():
    pts = np.tile([1.0, 2.0, 3.0], (5, 1))
    b = pca_basis(pts)
    assert b.rank == 0
    assert np.array_equal(project_affine([9.0, 9.0, 9.0], b), b.mean)


def test_plane_recovery():
    r = RngStream(3)
    q, _ = np.linalg.qr(r.normal(size=(16, 2)))
    pts = r.normal(size=(50, 2)) @ q.T + 4.0
    b = pca_basis(pts, 0.99)
    assert b.rank == 2
    cosines = np.linalg.svd(q.T @ b.basis, compute_uv=False)
    assert np.max(np.arccos(np.clip(cosines, -1, 1))) < 1e-3


def test_pca_needs_two_points():
    with pytest.raises(ValueError):
        pca_basis(np.zeros((1, 3)))


def test_rng_streams_are_reproducible_and_children_independent():
    a, b = RngStream(5), RngStream(5)
    assert np.array_equal(a.normal(size=4), b.normal(size=4))
    c0, c1 = RngStream(5).child(0), RngStream(5).child(1)
    assert not np.array_equal(c0.normal(size=4), c1.normal(size=4))
    assert np.array_equal(RngStream(5).child(7).uniform(size=3), RngStream(5).child(7).uniform(size=3))
