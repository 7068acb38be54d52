"""Raw-datapoint exchange: reserve push and the two-stage importance pull.

A receiver ``i`` pushes a few representative points (its *reserve*) to each
neighbour ``j`` once.  At every pull, ``j`` embeds a uniform subsample of its
own data together with ``i``'s reserve, clusters the union and favours
clusters that are mostly its own (cluster-level, "macro" probability) and,
inside a cluster, points that give a large triplet loss when used as
negatives against ``i``'s reserve anchors ("micro" probability).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import clustering
from .data import AugmentationSpec, augment
from .encoder import EncoderModel, forward
from .errors import DataError, EmptyCandidateError, InfeasibleKError


@dataclass(frozen=True)
class ReserveData:
    owner: int
    target: int
    points: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class PullRequest:
    receiver: int
    transmitter: int
    budget: int
    t: int
    model: Optional[EncoderModel] = None

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"pull budget must be positive, got {self.budget}")


@dataclass
class SamplingTrace:
    """Everything needed to recompute or audit one pull."""
    cluster_of: np.ndarray
    macro: np.ndarray
    micro: np.ndarray
    final: np.ndarray
    sampled: np.ndarray
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExchangePlan:
    transmitter: int
    receiver: int
    t: int
    indices: np.ndarray        # positions in the candidate set
    source_indices: np.ndarray  # positions in the transmitter's dataset
    payload: np.ndarray
    kind: str = "datapoint"

    def __len__(self):
        return len(self.indices)


# ------------------------------------------------------------- sampling --

def draw_without_replacement(probs, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Sequential draws from ``probs``, renormalising after each removal.

    Once the positive mass is exhausted the remaining slots are filled
    uniformly from the untouched candidates, so exactly
    ``min(budget, len(probs))`` distinct indices come back.
    """
    p = np.array(probs, dtype=np.float64)
    n = len(p)
    if n == 0:
        raise EmptyCandidateError("no candidates to sample from")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    k = min(int(budget), n)
    if k == n:
        return np.arange(n)
    taken = []
    for _ in range(k):
        total = p.sum()
        if total > 0:
            idx = int(rng.choice(n, p=p / total))
        else:
            free = np.flatnonzero(~np.isin(np.arange(n), taken))
            idx = int(free[rng.integers(len(free))])
        taken.append(idx)
        p[idx] = 0.0
    return np.array(taken, dtype=np.int64)


def uniform_subset(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k > n:
        raise InfeasibleKError(f"cannot draw {k} of {n} without replacement")
    if k < 0:
        raise InfeasibleKError("sample size must be non-negative")
    return np.sort(rng.choice(n, size=k, replace=False))


# ---------------------------------------------------------------- reserve --

def pick_nearest_distinct(model: clustering.ClusterModel, points) -> np.ndarray:
    """One distinct datapoint per cluster, the one closest to its centroid."""
    P = np.asarray(points, dtype=np.float64)
    chosen = []
    used = np.zeros(len(P), dtype=bool)
    for h in range(model.k):
        d = ((P - model.centroids[h]) ** 2).sum(axis=1)
        members = (model.assignments == h) & ~used
        pool = np.flatnonzero(members) if members.any() else np.flatnonzero(~used)
        idx = int(pool[np.argmin(d[pool])])
        used[idx] = True
        chosen.append(idx)
    return np.array(chosen, dtype=np.int64)


def select_reserve(dataset, K: int, rng: np.random.Generator, owner: int = -1,
                   target: int = -1) -> ReserveData:
    """K-means++ on the local data; the point nearest each centroid is kept."""
    P = np.asarray(dataset, dtype=np.float64)
    if K > len(P):
        raise InfeasibleKError(f"K_reserve={K} exceeds local dataset size {len(P)}")
    cm = clustering.kmeanspp(P, K, rng)
    idx = pick_nearest_distinct(cm, P)
    return ReserveData(owner, target, P[idx], idx)


def select_reserve_uniform(dataset, K: int, rng: np.random.Generator, owner: int = -1,
                           target: int = -1) -> ReserveData:
    P = np.asarray(dataset, dtype=np.float64)
    idx = uniform_subset(len(P), K, rng)
    return ReserveData(owner, target, P[idx], idx)


def approx_local(dataset, K: int, rng: np.random.Generator):
    """Uniform subsample of ``K`` local points: ``(points, indices)``."""
    P = np.asarray(dataset, dtype=np.float64)
    idx = uniform_subset(len(P), K, rng)
    return P[idx], idx


# ------------------------------------------------------------ importance --

def macro_from_counts(approx_counts, reserve_counts) -> np.ndarray:
    """Cluster probabilities from the share of transmitter points in each cluster.

    Clusters without transmitter points get zero mass.
    """
    a = np.asarray(approx_counts, dtype=np.float64)
    r = np.asarray(reserve_counts, dtype=np.float64)
    X = np.divide(a, a + r, out=np.zeros_like(a), where=a > 0)
    total = X.sum()
    if total <= 0:
        raise EmptyCandidateError("no cluster holds a transmitter point")
    return X / total


def macro_probs(approx_emb, reserve_emb, K_clusters: int, rng: np.random.Generator):
    """Joint K-means++ over candidate and reserve embeddings.

    Returns ``(cluster_model, macro, approx_counts, reserve_counts)``; the first
    ``len(approx_emb)`` assignments belong to the candidates.
    """
    A = np.atleast_2d(np.asarray(approx_emb, dtype=np.float64))
    R = np.atleast_2d(np.asarray(reserve_emb, dtype=np.float64))
    if len(A) == 0 or len(R) == 0:
        raise DataError("macro_probs needs non-empty candidate and reserve sets")
    cm = clustering.kmeanspp(np.vstack([A, R]), K_clusters, rng)
    a_cnt = np.bincount(cm.assignments[:len(A)], minlength=cm.k)
    r_cnt = np.bincount(cm.assignments[len(A):], minlength=cm.k)
    return cm, macro_from_counts(a_cnt, r_cnt), a_cnt, r_cnt


def expected_losses(cand_emb, anchor_emb, positive_emb, margin: float) -> np.ndarray:
    """Mean triplet loss of each candidate used as the negative for every anchor."""
    C = np.atleast_2d(cand_emb)
    A = np.atleast_2d(anchor_emb)
    Pp = np.atleast_2d(positive_emb)
    pos = ((A - Pp) ** 2).sum(axis=1)
    neg = clustering.sq_dists(C, A)  # (n_cand, n_anchor)
    return np.maximum(0.0, pos[None, :] - neg + margin).mean(axis=1)


def softmax(values, temperature: float) -> np.ndarray:
    v = temperature * np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("temperature-scaled losses must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def micro_probs(losses, temperature: float) -> np.ndarray:
    """Within-cluster distribution: softmax of expected losses at the given temperature."""
    return softmax(losses, temperature)


def combine(cluster_of, macro, micro) -> np.ndarray:
    return np.asarray(micro) * np.asarray(macro)[np.asarray(cluster_of)]


def explicit_distribution(cand_emb, reserve_emb, reserve_aug_emb, K_clusters: int,
                          margin: float, temperature: float, rng: np.random.Generator):
    """Analytic per-candidate pull distribution; returns a :class:`SamplingTrace` without draws."""
    K = min(K_clusters, len(cand_emb) + len(reserve_emb))
    cm, macro, a_cnt, r_cnt = macro_probs(cand_emb, reserve_emb, K, rng)
    cluster_of = cm.assignments[:len(cand_emb)]
    losses = expected_losses(cand_emb, reserve_emb, reserve_aug_emb, margin)
    micro = np.zeros(len(cand_emb))
    for h in np.unique(cluster_of):
        m = cluster_of == h
        micro[m] = micro_probs(losses[m], temperature)
    final = combine(cluster_of, macro, micro)
    return SamplingTrace(cluster_of, macro, micro, final, np.zeros(0, np.int64),
                         {"losses": losses, "approx_counts": a_cnt, "reserve_counts": r_cnt})


def sample_pull(req: PullRequest, reserve_points, approx_points, approx_source,
                rng: np.random.Generator, K_clusters: int = 20, margin: float = 1.0,
                temperature: float = 1.0,
                augmentation: Optional[AugmentationSpec] = None):
    """Importance-sampled pull of ``req.budget`` datapoints from the transmitter's candidates."""
    C = np.asarray(approx_points, dtype=np.float64)
    if len(C) == 0:
        raise EmptyCandidateError("transmitter has no candidates")
    R = np.asarray(reserve_points, dtype=np.float64)
    R_aug = augment(R, augmentation, rng) if augmentation is not None else R
    emb = forward(req.model, np.vstack([C, R, R_aug]))
    n, k = len(C), len(R)
    trace = explicit_distribution(emb[:n], emb[n:n + k], emb[n + k:], K_clusters,
                                  margin, temperature, rng)
    trace.sampled = draw_without_replacement(trace.final, req.budget, rng)
    src = np.asarray(approx_source)[trace.sampled]
    plan = ExchangePlan(req.transmitter, req.receiver, req.t, trace.sampled, src, C[trace.sampled])
    return plan, trace


def sample_pull_uniform(req: PullRequest, approx_points, approx_source,
                        rng: np.random.Generator) -> ExchangePlan:
    C = np.asarray(approx_points, dtype=np.float64)
    if len(C) == 0:
        raise EmptyCandidateError("transmitter has no candidates")
    idx = uniform_subset(len(C), min(req.budget, len(C)), rng)
    return ExchangePlan(req.transmitter, req.receiver, req.t, idx,
                        np.asarray(approx_source)[idx], C[idx])


def kmeans_representatives(cand_emb, budget: int, K_clusters: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Candidates nearest the centroids of their own embeddings.

    Clusters are visited largest first (ties by index); when the budget exceeds
    the cluster count the next-nearest members are taken round-robin.
    """
    E = np.asarray(cand_emb, dtype=np.float64)
    n = len(E)
    budget = min(budget, n)
    K = min(max(K_clusters, 1), n)
    cm = clustering.kmeanspp(E, K, rng)
    d = ((E - cm.centroids[cm.assignments]) ** 2).sum(axis=1)
    order = sorted(range(cm.k), key=lambda h: (-cm.counts[h], h))
    queues = {h: list(np.flatnonzero(cm.assignments == h)[np.argsort(d[cm.assignments == h],
                                                                      kind="stable")])
              for h in order}
    out = []
    while len(out) < budget:
        for h in order:
            if queues[h] and len(out) < budget:
                out.append(int(queues[h].pop(0)))
    return np.array(out, dtype=np.int64)


def sample_pull_kmeans(req: PullRequest, approx_points, approx_source, K_clusters: int,
                       rng: np.random.Generator) -> ExchangePlan:
    """Baseline: send the candidates closest to the transmitter's own cluster centres."""
    C = np.asarray(approx_points, dtype=np.float64)
    if len(C) == 0:
        raise EmptyCandidateError("transmitter has no candidates")
    idx = kmeans_representatives(forward(req.model, C), req.budget, K_clusters, rng)
    return ExchangePlan(req.transmitter, req.receiver, req.t, idx,
                        np.asarray(approx_source)[idx], C[idx])
