import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfcl import clustering
from cfcl.data import AugmentationSpec
from cfcl.encoder import EncoderModel
from cfcl.errors import EmptyCandidateError, InfeasibleKError
from cfcl.explicit import (PullRequest, approx_local, combine, draw_without_replacement,
                           expected_losses, explicit_distribution, kmeans_representatives,
                           macro_from_counts, macro_probs, micro_probs, sample_pull,
                           sample_pull_kmeans, sample_pull_uniform, select_reserve,
                           select_reserve_uniform, uniform_subset)


def identity(dim):
    return EncoderModel((dim, dim), np.concatenate([np.eye(dim).ravel(), np.zeros(dim)]))


# ------------------------------------------------------------------ reserve --

def test_reserve_whole_dataset_when_k_equals_n():
    P = np.random.default_rng(0).normal(size=(7, 2))
    res = select_reserve(P, 7, np.random.default_rng(1))
    assert sorted(res.indices.tolist()) == list(range(7))
    res_u = select_reserve_uniform(P, 7, np.random.default_rng(1))
    assert res_u.indices.tolist() == list(range(7))


def test_reserve_separated_pairs():
    P = np.array([[0, 0], [0.1, 0], [10, 0], [10.1, 0]], dtype=float)
    res = select_reserve(P, 2, np.random.default_rng(0))
    assert {int(i) // 2 for i in res.indices} == {0, 1}


def test_reserve_is_nearest_member_per_cluster():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(50, 2))
    res = select_reserve(P, 5, np.random.default_rng(4))
    cm = clustering.kmeanspp(P, 5, np.random.default_rng(4))
    for h in range(5):
        members = np.flatnonzero(cm.assignments == h)
        best = members[np.argmin(((P[members] - cm.centroids[h]) ** 2).sum(1))]
        assert res.indices[h] == best
    assert len(set(res.indices.tolist())) == 5


def test_reserve_infeasible():
    with pytest.raises(InfeasibleKError):
        select_reserve(np.zeros((3, 2)), 4, np.random.default_rng(0))
    with pytest.raises(InfeasibleKError):
        approx_local(np.zeros((3, 2)), 4, np.random.default_rng(0))


def test_uniform_subset_reproducible():
    assert np.array_equal(uniform_subset(20, 5, np.random.default_rng(9)),
                          uniform_subset(20, 5, np.random.default_rng(9)))


def test_uniform_inclusion_frequency_binomial():
    n, k, trials = 10, 3, 20_000
    rng = np.random.default_rng(0)
    counts = np.zeros(n)
    for _ in range(trials):
        counts[uniform_subset(n, k, rng)] += 1
    p = k / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3.5 * sigma)


# -------------------------------------------------------------------- macro --

def test_macro_hand_values():
    np.testing.assert_allclose(macro_from_counts([10, 10], [0, 10]), [2 / 3, 1 / 3])
    np.testing.assert_allclose(macro_from_counts([4], [9]), [1.0])


def test_macro_reserve_only_cluster_excluded_and_all_zero_errors():
    np.testing.assert_allclose(macro_from_counts([0, 5], [3, 1]), [0, 1])
    with pytest.raises(EmptyCandidateError):
        macro_from_counts([0, 0], [2, 3])


def test_macro_probs_direct_evaluation():
    rng = np.random.default_rng(2)
    A = np.vstack([rng.normal(c, 0.05, size=(n, 2)) for c, n in (((0, 0), 4), ((5, 0), 3), ((0, 5), 2))])
    R = np.vstack([rng.normal(c, 0.05, size=(n, 2)) for c, n in (((5, 0), 3), ((0, 5), 1))])
    cm, macro, a_cnt, r_cnt = macro_probs(A, R, 3, np.random.default_rng(0))
    X = []
    for h in range(3):
        na = int((cm.assignments[:len(A)] == h).sum())
        nr = int((cm.assignments[len(A):] == h).sum())
        X.append(na / (na + nr) if na else 0.0)
    np.testing.assert_allclose(macro, np.array(X) / sum(X), atol=1e-15)
    assert sorted(zip(a_cnt.tolist(), r_cnt.tolist())) == [(2, 1), (3, 3), (4, 0)]


def test_reserve_repulsion():
    macro = macro_from_counts([10, 10], [0, 10])
    assert macro[0] > macro[1]


# -------------------------------------------------------------------- micro --

def test_micro_examples():
    np.testing.assert_allclose(micro_probs([3.0, 7.0, 1.0], 0.0), [1 / 3] * 3)
    np.testing.assert_allclose(micro_probs([2.5], 1.0), [1.0])
    np.testing.assert_allclose(micro_probs([1.0, 2.0], 1.0), [0.2689414213699951, 0.7310585786300049],
                               atol=1e-12)


def test_temperature_limit_is_uniform():
    losses = np.random.default_rng(0).uniform(0, 5, size=9)
    assert np.abs(micro_probs(losses, 1e-12) - 1 / 9).max() < 1e-9


def test_micro_softmax_stable_for_large_losses():
    p = micro_probs([1000.0, 1001.0], 1.0)
    np.testing.assert_allclose(p, [0.2689414213699951, 0.7310585786300049], atol=1e-12)


def test_expected_losses_brute_force():
    rng = np.random.default_rng(3)
    C, A, Pp = rng.normal(size=(4, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    want = [np.mean([max(0.0, np.sum((a - p) ** 2) - np.sum((a - c) ** 2) + 1.5)
                     for a, p in zip(A, Pp)]) for c in C]
    np.testing.assert_allclose(expected_losses(C, A, Pp, 1.5), want, atol=1e-12)


# ------------------------------------------------------------------ sampling --

def test_draw_budget_exhaustion_and_distinctness():
    rng = np.random.default_rng(0)
    assert draw_without_replacement([0.2, 0.8, 0.0], 3, rng).tolist() == [0, 1, 2]
    out = draw_without_replacement([0.5, 0.5, 0.0, 0.0], 3, rng)
    assert len(set(out.tolist())) == 3 and set(out[:2].tolist()) == {0, 1}
    with pytest.raises(EmptyCandidateError):
        draw_without_replacement([], 1, rng)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.integers(1, 15),
       st.integers(0, 2**32 - 1))
def test_draw_exact_count_distinct(probs, budget, seed):
    out = draw_without_replacement(probs, budget, np.random.default_rng(seed))
    assert len(out) == min(budget, len(probs)) == len(set(out.tolist()))


def test_combine_is_product():
    np.testing.assert_allclose(combine([0, 1, 1], [0.25, 0.75], [1.0, 0.4, 0.6]),
                               [0.25, 0.3, 0.45])


def test_distribution_trace_consistency():
    rng = np.random.default_rng(5)
    cand, res = rng.normal(size=(12, 3)), rng.normal(size=(4, 3))
    tr = explicit_distribution(cand, res, res + 0.1, 3, 1.0, 2.0, rng)
    assert tr.final.sum() == pytest.approx(1.0, abs=1e-12)
    assert tr.macro.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(tr.final, tr.micro * tr.macro[tr.cluster_of])
    for h in np.unique(tr.cluster_of):
        assert tr.micro[tr.cluster_of == h].sum() == pytest.approx(1.0, abs=1e-12)


def test_sample_pull_budget_all():
    rng = np.random.default_rng(0)
    C = rng.normal(size=(5, 2))
    req = PullRequest(0, 1, 5, 25, identity(2))
    plan, _ = sample_pull(req, rng.normal(size=(2, 2)), C, np.arange(10, 15), rng, K_clusters=2)
    assert sorted(plan.indices.tolist()) == list(range(5))
    assert sorted(plan.source_indices.tolist()) == list(range(10, 15))
    np.testing.assert_array_equal(plan.payload, C[plan.indices])


def test_sample_pull_one_cluster_zero_temperature_is_uniform():
    C = np.random.default_rng(0).normal(size=(6, 2))
    req = PullRequest(0, 1, 1, 0, identity(2))
    counts = np.zeros(6)
    rng = np.random.default_rng(1)
    for _ in range(3000):
        plan, trace = sample_pull(req, C[:1] + 0.01, C, np.arange(6), rng, K_clusters=1,
                                  temperature=0.0)
        counts[plan.indices] += 1
    np.testing.assert_allclose(trace.final, 1 / 6)
    assert np.abs(counts / 3000 - 1 / 6).max() < 0.03


def test_sample_pull_deterministic():
    def once():
        rng = np.random.default_rng(7)
        C = rng.normal(size=(20, 2))
        plan, _ = sample_pull(PullRequest(0, 1, 4, 0, identity(2)), C[:3] + 0.2, C,
                              np.arange(20), rng, K_clusters=3,
                              augmentation=AugmentationSpec(sigma=0.1))
        return plan.indices.tolist()
    assert once() == once()


def test_budget_must_be_positive():
    with pytest.raises(ValueError):
        PullRequest(0, 1, 0, 0)


def test_uniform_pull():
    rng = np.random.default_rng(0)
    C = rng.normal(size=(6, 2))
    plan = sample_pull_uniform(PullRequest(0, 1, 6, 0), C, np.arange(6), rng)
    assert plan.indices.tolist() == list(range(6))
    a = sample_pull_uniform(PullRequest(0, 1, 2, 0), C, np.arange(6), np.random.default_rng(3))
    b = sample_pull_uniform(PullRequest(0, 1, 2, 0), C, np.arange(6), np.random.default_rng(3))
    assert a.indices.tolist() == b.indices.tolist()


def test_kmeans_pull_separated_pairs_and_all():
    C = np.array([[0, 0], [0.1, 0], [10, 0], [10.1, 0]], dtype=float)
    plan = sample_pull_kmeans(PullRequest(0, 1, 2, 0, identity(2)), C, np.arange(4), 2,
                              np.random.default_rng(0))
    assert {int(i) // 2 for i in plan.indices} == {0, 1}
    plan = sample_pull_kmeans(PullRequest(0, 1, 4, 0, identity(2)), C, np.arange(4), 4,
                              np.random.default_rng(0))
    assert sorted(plan.indices.tolist()) == [0, 1, 2, 3]


def test_kmeans_representatives_nearest_to_centroid_scan():
    rng = np.random.default_rng(4)
    E = rng.normal(size=(30, 2))
    out = kmeans_representatives(E, 4, 4, np.random.default_rng(2))
    cm = clustering.kmeanspp(E, 4, np.random.default_rng(2))
    want = set()
    for h in range(4):
        m = np.flatnonzero(cm.assignments == h)
        want.add(int(m[np.argmin(((E[m] - cm.centroids[h]) ** 2).sum(1))]))
    assert set(out.tolist()) == want


def test_kmeans_representatives_round_robin_beyond_k():
    E = np.array([[0.0], [0.1], [0.3], [10.0], [10.2]])
    out = kmeans_representatives(E, 4, 2, np.random.default_rng(0))
    # largest cluster first, then next-nearest members in turn
    assert out.tolist() == [1, 3, 0, 4]
