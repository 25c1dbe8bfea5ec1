import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from npcnet.clusterop import (
    CentroidSet,
    assign_cluster,
    assign_clusters,
    batch_mean_centroids,
    clustering_loss,
    init_centroids,
    update_centroids,
)
from npcnet.netcore import autodiff as ad
from npcnet.netcore.autodiff import Parameter, Tensor


def _loss(E, M, s):
    return clustering_loss(Tensor(E), M, s).item()


def test_nearest_centroid():
    assert assign_cluster(np.array([1.0, 1.0]), np.array([[0.0, 0.0], [10.0, 10.0]])) == 0


def test_tie_goes_to_lower_index():
    M = np.array([[2.0, 0.0], [0.0, 0.0], [-2.0, 0.0]])
    assert assign_cluster(np.array([1.0, 0.0]), M) == 0
    assert assign_cluster(np.array([-1.0, 0.0]), M) == 1


def test_assignment_matches_exhaustive_oracle(rng):
    E, M = rng.normal(size=(100, 3)), rng.normal(size=(5, 3))
    oracle = []
    for e in E:
        d = [sum((e[t] - m[t]) ** 2 for t in range(3)) for m in M]
        oracle.append(d.index(min(d)))
    assert assign_clusters(E, M).tolist() == oracle


def test_non_finite_embedding_rejected():
    with pytest.raises(ValueError):
        assign_clusters(np.array([[np.nan, 0.0]]), np.zeros((2, 2)))


def test_assignment_permutation_invariant(rng):
    E, M = rng.normal(size=(30, 2)), rng.normal(size=(4, 2))
    perm = rng.permutation(30)
    np.testing.assert_array_equal(assign_clusters(E[perm], M), assign_clusters(E, M)[perm])


def test_loss_examples(rng):
    M = np.array([[0.0, 0.0], [5.0, 5.0]])
    assert _loss(M.copy(), M, np.array([0, 1])) == 0.0
    assert _loss(np.array([[2.0, 0.0]]), M, np.array([0])) == 4.0
    E = rng.normal(size=(10, 2))
    s = rng.integers(0, 2, size=10)
    hand = sum(float(np.sum((E[i] - M[s[i]]) ** 2)) for i in range(10))
    assert _loss(E, M, s) == pytest.approx(hand, abs=1e-12)


def test_loss_gradient_only_reaches_embeddings(rng):
    E = Parameter(rng.normal(size=(4, 2)))
    M = rng.normal(size=(2, 2))
    s = np.array([0, 1, 1, 0])
    clustering_loss(E, M, s).backward()
    np.testing.assert_allclose(E.grad, 2 * (E.value - M[s]))


def test_single_sample_moves_halfway():
    out = update_centroids(np.array([[2.0, 4.0]]), np.array([0]), CentroidSet(np.zeros((2, 2)), [1, 1]))
    np.testing.assert_array_equal(out.M[0], [1.0, 2.0])
    np.testing.assert_array_equal(out.M[1], [0.0, 0.0])
    assert out.counts.tolist() == [2, 1]


def test_sample_at_centroid_is_fixed_point():
    c = CentroidSet(np.array([[1.0, 1.0], [3.0, 3.0]]), [4, 2])
    out = update_centroids(np.array([[1.0, 1.0]]), np.array([0]), c)
    np.testing.assert_array_equal(out.M, c.M)


def test_stream_gives_running_mean(rng):
    samples = rng.normal(size=(50, 3))
    start = rng.normal(size=(1, 3))
    out = update_centroids(samples, np.zeros(50, dtype=int), CentroidSet(start, [1]))
    # count starts at 1 so the initial centroid is weighted as one extra sample
    expected = (start[0] + samples.sum(axis=0)) / 51
    np.testing.assert_allclose(out.M[0], expected, atol=1e-10)


def test_update_does_not_mutate_input():
    c = CentroidSet(np.zeros((2, 2)), [1, 1])
    update_centroids(np.ones((3, 2)), np.array([0, 0, 1]), c)
    np.testing.assert_array_equal(c.M, 0.0)


@given(
    arrays(np.float64, (12, 2), elements=st.floats(-10, 10)),
    arrays(np.float64, (3, 2), elements=st.floats(-10, 10)),
    st.lists(st.integers(0, 2), min_size=12, max_size=12),
)
def test_alternating_steps_never_increase_loss(E, M, s):
    s = np.array(s)
    before = _loss(E, M, s)
    s_new = assign_clusters(E, M)
    after_assign = _loss(E, M, s_new)
    assert after_assign <= before + 1e-9
    M_new = batch_mean_centroids(E, s_new, CentroidSet(M, [1, 1, 1])).M
    assert _loss(E, M_new, s_new) <= after_assign + 1e-9
    assert np.all(np.bincount(s_new, minlength=3).sum() == 12)


def test_blob_recovery(rng):
    means = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=float)
    sigma = 0.3
    E = np.concatenate([m + sigma * rng.normal(size=(25, 2)) for m in means])
    c = init_centroids(E, 4, seed=0)
    for m in means:
        assert np.min(np.linalg.norm(c.M - m, axis=1)) < 3 * sigma
    assert c.counts.tolist() == [25, 25, 25, 25]


def test_k_equals_n_gives_zero_loss(rng):
    E = rng.normal(size=(5, 3))
    c = init_centroids(E, 5, seed=1)
    assert _loss(E, c.M, assign_clusters(E, c.M)) == pytest.approx(0.0, abs=1e-20)


def test_init_deterministic_and_checked(rng):
    E = rng.normal(size=(40, 2))
    np.testing.assert_array_equal(init_centroids(E, 3, 5).M, init_centroids(E, 3, 5).M)
    with pytest.raises(ValueError):
        init_centroids(E[:2], 3, 0)
    assert np.all(init_centroids(E, 3, 5).counts >= 1)
