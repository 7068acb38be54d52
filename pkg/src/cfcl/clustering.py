"""K-means++ seeding, Lloyd iterations and per-cluster statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, InfeasibleKError


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    counts: np.ndarray
    radii: np.ndarray
    n_iter: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)

    def members(self, h: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == h)


def sq_dists(points, centroids) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape ``(n_points, n_centroids)``."""
    P = np.asarray(points, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    d = (P * P).sum(1)[:, None] - 2.0 * P @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(points, centroids) -> np.ndarray:
    """Nearest centroid per point; ties go to the lowest index."""
    P = np.asarray(points, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    if P.shape[-1] != C.shape[-1]:
        raise DataError(f"point dim {P.shape[-1]} != centroid dim {C.shape[-1]}")
    # exact differences, so equidistant ties are not broken by rounding noise
    d = ((P[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def objective(points, centroids, assignments) -> float:
    P = np.asarray(points, dtype=np.float64)
    return float(((P - np.asarray(centroids)[assignments]) ** 2).sum())


def cluster_radii(model: ClusterModel, points) -> np.ndarray:
    """Largest member-to-centroid Euclidean distance per cluster (0 when empty)."""
    P = np.asarray(points, dtype=np.float64)
    r = np.zeros(model.k)
    d = np.sqrt(((P - model.centroids[model.assignments]) ** 2).sum(axis=1))
    np.maximum.at(r, model.assignments, d)
    return r


def seed_plusplus(P: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """D^2 sampling of ``K`` initial centroids."""
    n = len(P)
    idx = [int(rng.integers(n))]
    d2 = ((P - P[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centres
            choice = int(rng.integers(n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        idx.append(choice)
        d2 = np.minimum(d2, ((P - P[choice]) ** 2).sum(axis=1))
    return P[idx].copy()


def lloyd(P: np.ndarray, centroids: np.ndarray, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd iterations from the given centroids.

    Returns ``(centroids, assignments, n_iter)``.  An empty cluster is reseeded
    at the point farthest from its current centroid.
    """
    C = centroids.copy()
    K = len(C)
    labels = assign(P, C)
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=K)
        onehot = np.zeros((len(P), K))
        onehot[np.arange(len(P)), labels] = 1.0
        new = (onehot.T @ P) / np.maximum(counts, 1)[:, None]
        for h in np.flatnonzero(counts == 0):
            far = np.argmax(((P - C[labels]) ** 2).sum(axis=1))
            new[h] = P[far]
            labels = labels.copy()
            labels[far] = h
        shift = np.sqrt(((new - C) ** 2).sum(axis=1)).max()
        C = new
        labels = assign(P, C)
        if shift < tol:
            break
    return C, labels, it


def _canonical(P, C):
    order = np.lexsort(C.T[::-1])
    C = C[order]
    labels = assign(P, C)
    return C, labels


def kmeanspp(points, K: int, rng: np.random.Generator, max_iter: int = 100,
             tol: float = 1e-6) -> ClusterModel:
    """K-means++ seeding followed by Lloyd iterations.

    Centroids are sorted lexicographically at the end so downstream consumers
    see a seed-stable cluster order.
    """
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or len(P) == 0:
        raise DataError("kmeanspp needs a non-empty 2-D array of points")
    if not np.all(np.isfinite(P)):
        raise DataError("kmeanspp got non-finite points")
    if K < 1:
        raise InfeasibleKError(f"K must be >= 1, got {K}")
    if K > len(P):
        raise InfeasibleKError(f"K={K} exceeds the number of points {len(P)}")
    C0 = seed_plusplus(P, K, rng)
    C, labels, n_iter = lloyd(P, C0, max_iter, tol)
    C, labels = _canonical(P, C)
    counts = np.bincount(labels, minlength=K)
    model = ClusterModel(C, labels, counts, np.zeros(K), n_iter)
    return ClusterModel(C, labels, counts, cluster_radii(model, P), n_iter)


def nearest_members(model: ClusterModel, points) -> np.ndarray:
    """Index of the member nearest each centroid (``-1`` for empty clusters)."""
    P = np.asarray(points, dtype=np.float64)
    out = np.full(model.k, -1)
    d = ((P - model.centroids[model.assignments]) ** 2).sum(axis=1)
    for h in range(model.k):
        m = np.flatnonzero(model.assignments == h)
        if m.size:
            out[h] = m[np.argmin(d[m])]
    return out
