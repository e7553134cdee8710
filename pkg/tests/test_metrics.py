import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobe import metrics


# ---------------------------------------------------------------- brute-force oracles


def ap_oracle(scores, labels):
    """Precision at the rank of every positive, ranks by descending score with
    earlier index first among equals."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    hits, precisions = 0, []
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def hamming_oracle(scores, labels):
    wrong = 0
    for srow, yrow in zip(scores, labels):
        for s, y in zip(srow, yrow):
            pred = 1 if 1.0 / (1.0 + np.exp(-s)) > 0.5 else 0
            wrong += pred != y
    return wrong / (len(scores) * len(scores[0]))


def random_case(rng, n, c, ties=False):
    scores = rng.standard_normal((n, c))
    if ties:
        scores = np.round(scores, 1)
    labels = (rng.random((n, c)) > 0.5).astype(float)
    labels[0] = 1.0
    labels[1] = 0.0   # every category has a positive and a negative
    return scores, labels


# ---------------------------------------------------------------- AP / mAP


def test_ap_hand_case_is_five_sixths():
    # 5/6 has no binary representation; "exact" means within one unit in the last place
    ap = metrics.average_precision([0.9, 0.5, 0.1], [1, 0, 1])
    assert abs(ap - 5 / 6) <= np.spacing(5 / 6)


def test_map_perfect_ranking():
    labels = np.array([[1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    assert metrics.mean_average_precision(labels * 2 - 1, labels) == 1.0


def test_map_matches_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for k in range(50):
        n = int(rng.integers(4, 65))
        scores, labels = random_case(rng, n, 8, ties=k % 2 == 0)
        expected = np.mean([ap_oracle(scores[:, c].tolist(), labels[:, c].tolist()) for c in range(8)])
        assert metrics.mean_average_precision(scores, labels) == pytest.approx(expected, abs=1e-12)


def test_map_skips_empty_categories():
    scores = np.array([[0.3, 0.1], [0.2, 0.9]])
    labels = np.array([[1.0, 0.0], [0.0, 0.0]])
    skipped = []
    assert metrics.mean_average_precision(scores, labels, skipped) == 1.0
    assert skipped == [1]


# ---------------------------------------------------------------- AUC


def test_auc_edge_cases():
    labels = np.array([1, 1, 0, 0], dtype=float)
    assert metrics.roc_auc(np.array([4.0, 3.0, 2.0, 1.0]), labels) == 1.0
    assert metrics.roc_auc(np.zeros(4), labels) == 0.5


def test_auc_matches_pair_oracle():
    rng = np.random.default_rng(1)
    for k in range(50):
        n = int(rng.integers(4, 65))
        scores, labels = random_case(rng, n, 8, ties=k % 2 == 0)
        expected = np.mean([auc_oracle(scores[:, c].tolist(), labels[:, c].tolist()) for c in range(8)])
        assert metrics.roc_auc(scores, labels) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_metrics_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores, labels = random_case(rng, 20, 3)
    warped = np.exp(2.0 * scores) + 5.0
    assert metrics.mean_average_precision(warped, labels) == pytest.approx(
        metrics.mean_average_precision(scores, labels), abs=1e-12)
    assert metrics.roc_auc(warped, labels) == pytest.approx(metrics.roc_auc(scores, labels), abs=1e-12)


# ---------------------------------------------------------------- Hamming


def test_hamming_edge_cases():
    labels = np.array([[1, 0, 1], [0, 0, 1]], dtype=float)
    assert metrics.hamming_distance(labels * 4 - 2, labels) == 0.0
    assert metrics.hamming_distance(2 - labels * 4, labels) == 1.0


def test_hamming_matches_loop():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 65))
        scores, labels = random_case(rng, n, 8)
        expected = hamming_oracle(scores.tolist(), labels.tolist())
        assert metrics.hamming_distance(scores, labels) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------- retrieval


def retrieval_oracle(queries, gallery, pool_size, repeats, seed):
    """Same pools as the implementation, scored with explicit loops."""
    q = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    hits = 0
    for i in range(len(q)):
        pools = metrics.sample_pools(len(q), pool_size, repeats, seed, i)
        target = sum(a * b for a, b in zip(q[i], g[i]))
        for pool in pools:
            if all(target > sum(a * b for a, b in zip(q[i], g[j])) for j in pool):
                hits += 1
    return hits / (len(q) * repeats)


def test_orthonormal_pairs_always_retrieved():
    e = np.eye(12)
    assert metrics.retrieval_accuracy(e, e, pool_size=5, repeats=10) == 1.0


def test_ties_count_as_failure():
    q = np.ones((6, 3))
    assert metrics.retrieval_accuracy(q, q, pool_size=3, repeats=5) == 0.0


def test_retrieval_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for k in range(50):
        n = int(rng.integers(3, 40))
        q, g = rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
        pool = int(rng.integers(2, n + 1))
        # direction "image" uses stream seed = 2 * seed
        got = metrics.retrieval_accuracy(q, g, pool, 3, "image", seed=k)
        assert got == pytest.approx(retrieval_oracle(q, g, pool, 3, 2 * k), abs=1e-12)


def test_retrieval_matches_pool_enumeration():
    # success probability of query i = fraction of (P-1)-subsets of the other
    # items whose max similarity is strictly below the positive's similarity
    rng = np.random.default_rng(4)
    n, pool, repeats = 10, 5, 1000
    q, g = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    sims = qn @ gn.T
    expected = 0.0
    for i in range(n):
        others = [j for j in range(n) if j != i]
        subsets = list(itertools.combinations(others, pool - 1))
        expected += sum(all(sims[i, i] > sims[i, j] for j in s) for s in subsets) / len(subsets)
    expected /= n
    got = metrics.retrieval_accuracy(q, g, pool, repeats, seed=0)
    # binomial sampling error over n * repeats draws
    assert abs(got - expected) < 4 * np.sqrt(0.25 / (n * repeats))


def test_pools_exclude_query_and_have_no_repeats():
    pools = metrics.sample_pools(20, 8, 50, seed=1, query=3)
    assert pools.shape == (50, 7)
    assert not (pools == 3).any()
    assert all(len(set(row)) == 7 for row in pools)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_retrieval_invariant_to_common_rotation(seed):
    rng = np.random.default_rng(seed)
    q, g = rng.standard_normal((15, 4)), rng.standard_normal((15, 4))
    rot, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = metrics.retrieval_accuracy(q, g, 6, 4, seed=seed)
    b = metrics.retrieval_accuracy(q @ rot, g @ rot, 6, 4, seed=seed)
    assert a == b


def test_retrieval_argument_errors():
    e = np.eye(4)
    with pytest.raises(ValueError):
        metrics.retrieval_accuracy(e, e, pool_size=5)
    with pytest.raises(ValueError):
        metrics.retrieval_accuracy(e, e, pool_size=1)
    with pytest.raises(ValueError):
        metrics.retrieval_accuracy(e, np.eye(3, 4))


def test_default_pool_is_min_300_n():
    rng = np.random.default_rng(5)
    q, g = rng.standard_normal((30, 4)), rng.standard_normal((30, 4))
    assert metrics.retrieval_accuracy(q, g, repeats=2) == metrics.retrieval_accuracy(q, g, 30, 2)


# ---------------------------------------------------------------- report


def test_report_average_identity_and_roundtrip():
    per = {0: {"mAP": 0.5, "AUC": 0.9, "hamming": 0.1, "image_retrieval_acc": None, "fmri_retrieval_acc": None},
           1: {"mAP": 0.7, "AUC": 0.8, "hamming": 0.3, "image_retrieval_acc": None, "fmri_retrieval_acc": None}}
    rep = metrics.MetricsReport.from_subjects(per, label="full", seed=3)
    assert rep.average["mAP"] == (0.5 + 0.7) / 2
    assert rep.average["hamming"] == (0.1 + 0.3) / 2
    assert rep.average["image_retrieval_acc"] is None
    back = metrics.MetricsReport.from_json(rep.to_json())
    assert back == rep
    assert "wall_clock_s" not in json.loads(rep.to_json(include_clock=False))
    lines = rep.to_csv().strip().splitlines()
    assert lines[0].startswith("label,seed,subject") and len(lines) == 4
