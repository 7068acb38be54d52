"""Embedding exchange: reserve embeddings, scored pulls and the staleness weight.

Distances inside the scores and the overlap ratio are squared Euclidean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import clustering
from .encoder import EncoderModel, forward
from .errors import ConfigError, DegenerateGeometryError, EmptyCandidateError
from .explicit import (ExchangePlan, PullRequest, ReserveData, SamplingTrace, approx_local,
                       draw_without_replacement, select_reserve)


@dataclass(frozen=True)
class ReserveEmbeddings:
    owner: int
    target: int
    embeddings: np.ndarray
    t: int = 0

    def __len__(self):
        return len(self.embeddings)


@dataclass(frozen=True)
class OverlapParams:
    mu: float = 0.0
    sigma: float = 1.0
    k_local: int = 20
    k_reserve: int = 20

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("overlap sigma must be positive")


ZETA_SCHEDULES = {
    "zero": lambda t, T: 0.0,
    "time_fraction": lambda t, T: t / T,
}


@dataclass(frozen=True)
class StalenessParams:
    scale: float = 1.0
    rho: float = 0.0
    zeta: Union[str, Callable[[int, int], float]] = "zero"
    T_a: int = 25
    T: int = 2000

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("staleness scale must be positive")
        if isinstance(self.zeta, str) and self.zeta not in ZETA_SCHEDULES:
            raise ValueError(f"unknown zeta schedule {self.zeta!r}")

    def zeta_at(self, t: int) -> float:
        fn = ZETA_SCHEDULES[self.zeta] if isinstance(self.zeta, str) else self.zeta
        return float(fn(t, self.T))


@dataclass(frozen=True)
class RegMarginParams:
    k: float = 1.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("margin scale k must be positive")


# ---------------------------------------------------------------- push --

def reserve_embeddings(reserve: ReserveData, model: EncoderModel, t: int = 0) -> ReserveEmbeddings:
    """Embed already-selected reserve points with the current global model."""
    return ReserveEmbeddings(reserve.owner, reserve.target, forward(model, reserve.points), t)


def select_reserve_embeddings(dataset, model: EncoderModel, K: int, rng: np.random.Generator,
                              owner: int = -1, target: int = -1, t: int = 0) -> ReserveEmbeddings:
    return reserve_embeddings(select_reserve(dataset, K, rng, owner, target), model, t)


def candidate_embeddings(dataset, model: EncoderModel, K: int, rng: np.random.Generator):
    """Uniform subsample of local points mapped through ``model``: ``(embeddings, indices)``.

    The indices are local bookkeeping only and never leave the device.
    """
    pts, idx = approx_local(dataset, K, rng)
    return forward(model, pts), idx


# ------------------------------------------------------------- scoring --

def embedding_scores(Z, centroids, assignments, reserve) -> np.ndarray:
    """Score of each embedding: distance to its own centroid times summed distance to the reserve."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    R = np.asarray(reserve, dtype=np.float64)
    own = ((Z - np.asarray(centroids)[assignments]) ** 2).sum(axis=1)
    if R.size == 0:
        return np.zeros(len(Z))
    to_reserve = clustering.sq_dists(Z, R.reshape(-1, Z.shape[1])).sum(axis=1)
    return own * to_reserve


def embedding_score(z, centroid, reserve) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(embedding_scores(z[None, :], np.asarray(centroid)[None, :], np.zeros(1, int),
                                  reserve)[0])


def cluster_scores(scores, assignments, K: int) -> np.ndarray:
    """Mean member score per cluster; empty clusters score 0."""
    scores = np.asarray(scores, dtype=np.float64)
    sums = np.bincount(assignments, weights=scores, minlength=K)
    counts = np.bincount(assignments, minlength=K)
    return np.divide(sums, counts, out=np.zeros(K), where=counts > 0)


def cluster_score(member_scores) -> float:
    s = np.asarray(member_scores, dtype=np.float64)
    return float(s.mean()) if s.size else 0.0


def normal_pdf(x, mu: float, sigma: float):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))


def overlap_ratios(local_centroids, reserve_centroids) -> np.ndarray:
    """Relative excess of mean distance to remote centroids over mean distance to other local ones."""
    L = np.asarray(local_centroids, dtype=np.float64)
    Rc = np.asarray(reserve_centroids, dtype=np.float64)
    if len(L) < 2:
        raise DegenerateGeometryError("overlap needs at least two local clusters")
    to_local = clustering.sq_dists(L, L).sum(axis=1) / (len(L) - 1)
    to_remote = clustering.sq_dists(L, Rc).mean(axis=1)
    if np.any(to_local <= 0):
        raise DegenerateGeometryError("local centroids coincide")
    return (to_remote - to_local) / to_local


def overlap_factor(h: int, local_centroids, reserve_centroids, params: OverlapParams) -> float:
    return float(normal_pdf(overlap_ratios(local_centroids, reserve_centroids)[h],
                            params.mu, params.sigma))


def implicit_macro_probs(S, B) -> np.ndarray:
    """Cluster probabilities proportional to score times overlap, renormalised."""
    w = np.asarray(S, dtype=np.float64) * np.asarray(B, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise EmptyCandidateError("every cluster has zero score x overlap")
    return w / total


def implicit_micro_probs(member_scores) -> np.ndarray:
    s = np.asarray(member_scores, dtype=np.float64)
    total = s.sum()
    if total > 0:
        return s / total
    return np.full(len(s), 1.0 / len(s))


def implicit_distribution(cand_emb, reserve_emb, params: OverlapParams, rng: np.random.Generator,
                          local_clusters: Optional[clustering.ClusterModel] = None) -> SamplingTrace:
    """Analytic pull distribution over candidate embeddings (no draws)."""
    Z = np.asarray(cand_emb, dtype=np.float64)
    R = np.asarray(reserve_emb, dtype=np.float64)
    if len(Z) == 0:
        raise EmptyCandidateError("no candidate embeddings")
    H = local_clusters or clustering.kmeanspp(Z, min(params.k_local, len(Z)), rng)
    RC = clustering.kmeanspp(R, min(params.k_reserve, len(R)), rng)
    scores = embedding_scores(Z, H.centroids, H.assignments, R)
    S = cluster_scores(scores, H.assignments, H.k)
    b = overlap_ratios(H.centroids, RC.centroids)
    B = normal_pdf(b, params.mu, params.sigma)
    macro = implicit_macro_probs(S, B)
    micro = np.zeros(len(Z))
    for h in range(H.k):
        m = H.assignments == h
        if m.any():
            micro[m] = implicit_micro_probs(scores[m])
    final = micro * macro[H.assignments]
    return SamplingTrace(H.assignments.copy(), macro, micro, final, np.zeros(0, np.int64),
                         {"scores": scores, "S": S, "b": b, "B": B})


def sample_embedding_pull(req: PullRequest, reserve: ReserveEmbeddings, cand_emb, cand_source,
                          params: OverlapParams, rng: np.random.Generator,
                          local_clusters: Optional[clustering.ClusterModel] = None):
    trace = implicit_distribution(cand_emb, reserve.embeddings, params, rng, local_clusters)
    trace.sampled = draw_without_replacement(trace.final, req.budget, rng)
    Z = np.asarray(cand_emb)
    plan = ExchangePlan(req.transmitter, req.receiver, req.t, trace.sampled,
                        np.asarray(cand_source)[trace.sampled], Z[trace.sampled], kind="embedding")
    return plan, trace


# ------------------------------------------------------ regulariser knobs --

def reg_margin(local_clusters: clustering.ClusterModel, k: float) -> float:
    """``k`` times the mean local cluster radius."""
    if not k > 0:
        raise ValueError("k must be positive")
    return float(k * np.mean(local_clusters.radii))


def reg_weight(t: int, params: StalenessParams) -> float:
    """Sawtooth staleness weight: resets at each aggregation, plus a slowly growing term."""
    if params.T_a < 2:
        raise ConfigError("T_a", "must be >= 2 for the staleness weight")
    first = math.exp(-(t % params.T_a) / (params.T_a - 1))
    second = math.exp(t / params.T - params.rho * params.zeta_at(t))
    return params.scale * (first + second)
