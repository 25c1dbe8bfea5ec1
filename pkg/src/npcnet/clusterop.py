"""Hard-assignment clustering operator with alternating centroid updates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import autodiff as ad
from .netcore.autodiff import Tensor
from .seeding import rng_for


@dataclass
class CentroidSet:
    M: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.M.ndim != 2 or self.M.shape[0] < 1:
            raise ValueError("centroid matrix must be k x d_E")
        if self.counts.shape != (self.M.shape[0],):
            raise ValueError("need one update counter per centroid")
        if not np.all(np.isfinite(self.M)):
            raise ValueError("centroids must be finite")

    @property
    def k(self) -> int:
        return self.M.shape[0]

    def copy(self) -> "CentroidSet":
        return CentroidSet(self.M.copy(), self.counts.copy())


def squared_distances(E: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``(N, k)`` matrix of squared Euclidean distances."""
    diff = E[:, None, :] - M[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign_clusters(E: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest index (``argmin`` order)."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    if not np.all(np.isfinite(E)):
        raise ValueError("cannot assign non-finite embeddings")
    if E.shape[1] != M.shape[1]:
        raise ValueError(f"embedding dim {E.shape[1]} != centroid dim {M.shape[1]}")
    if E.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(squared_distances(E, M), axis=1).astype(np.int64)


def assign_cluster(E_i: np.ndarray, M: np.ndarray) -> int:
    return int(assign_clusters(np.asarray(E_i, dtype=float)[None, :], M)[0])


def clustering_loss(E: Tensor, M: np.ndarray, assignments: np.ndarray) -> Tensor:
    """Sum over rows of ``||E_i - M[s_i]||^2``; ``M`` and the assignments are constants."""
    target = np.asarray(M, dtype=float)[np.asarray(assignments, dtype=np.int64)]
    return ad.sum(ad.squared_norm(ad.sub(E, target), axis=-1))


def update_centroids(
    E: np.ndarray, assignments: np.ndarray, centroids: CentroidSet
) -> CentroidSet:
    """Sequential count-scaled update, visiting samples in the given order.

    For sample ``i`` in cluster ``j``: ``counts[j] += 1`` then
    ``M[j] -= (M[j] - E[i]) / counts[j]``.
    """
    out = centroids.copy()
    M, counts = out.M, out.counts
    for e, j in zip(np.asarray(E, dtype=float), np.asarray(assignments, dtype=np.int64)):
        counts[j] += 1
        M[j] -= (M[j] - e) / counts[j]
    return out


def batch_mean_centroids(E: np.ndarray, assignments: np.ndarray, centroids: CentroidSet) -> CentroidSet:
    """Replace each non-empty cluster's centroid by the mean of its members."""
    out = centroids.copy()
    for j in range(out.k):
        members = E[assignments == j]
        if len(members):
            out.M[j] = members.mean(axis=0)
            out.counts[j] += len(members)
    return out


def kmeans_plus_plus(E: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = E.shape[0]
    centers = [E[int(rng.integers(n))]]
    d2 = ((E - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(E[idx])
        d2 = np.minimum(d2, ((E - E[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(
    E: np.ndarray, k: int, seed: int, tol: float = 1e-6, max_iter: int = 300
) -> tuple[np.ndarray, np.ndarray, int]:
    """k-means++ seeding then Lloyd iterations until centroid shift <= tol.

    Returns ``(centroids, labels, iterations)``.  An empty cluster keeps its
    previous centroid.
    """
    E = np.asarray(E, dtype=float)
    if E.shape[0] < k:
        raise ValueError(f"need at least k={k} points to initialise centroids, got {E.shape[0]}")
    M = kmeans_plus_plus(E, k, rng_for(seed, "kmeans++"))
    labels = assign_clusters(E, M)
    it = 0
    for it in range(1, max_iter + 1):
        new = M.copy()
        for j in range(k):
            members = E[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.sqrt(((new - M) ** 2).sum(axis=1)).max())
        M = new
        labels = assign_clusters(E, M)
        if shift <= tol:
            break
    return M, labels, it


def inertia(E: np.ndarray, M: np.ndarray, labels: np.ndarray) -> float:
    return float(((E - M[labels]) ** 2).sum())


def init_centroids(E_train: np.ndarray, k: int, seed: int, n_init: int = 10) -> CentroidSet:
    """Best of ``n_init`` k-means runs on the pretrained embeddings.

    Counters start at the cluster sizes (at least 1).
    """
    E_train = np.asarray(E_train, dtype=float)
    best = None
    for r in range(max(n_init, 1)):
        M, labels, _ = kmeans(E_train, k, seed + r)
        score = inertia(E_train, M, labels)
        if best is None or score < best[0]:
            best = (score, M, labels)
    _, M, labels = best
    counts = np.maximum(np.bincount(labels, minlength=k), 1)
    return CentroidSet(M, counts)
