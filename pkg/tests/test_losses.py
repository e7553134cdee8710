import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobe import autodiff as ad
from mobe import losses
from mobe.autodiff import Tensor


def onehot(ids, k):
    return np.eye(k)[np.asarray(ids)]


# ---------------------------------------------------------------- scalar oracles


def router_oracle(logits, ids):
    total = 0.0
    for row, s in zip(logits, ids):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[s]
    return total / len(ids)


def bce_oracle(logits, labels):
    total = 0.0
    for x, y in zip(np.ravel(logits), np.ravel(labels)):
        p = 1.0 / (1.0 + math.exp(-x))
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / np.size(logits)


def infonce_oracle(h, y, tau):
    n = len(h)
    logits = [[sum(a * b for a, b in zip(h[i], y[j])) / tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row = logits[i]
        total -= row[i] - math.log(sum(math.exp(v) for v in row))
        col = [logits[j][i] for j in range(n)]
        total -= col[i] - math.log(sum(math.exp(v) for v in col))
    return total


def gram_loop(rows):
    n = len(rows)
    return [[sum(a * b for a, b in zip(rows[i], rows[j])) for j in range(n)] for i in range(n)]


def cosine_loop(A, B):
    dot = sum(a * b for ra, rb in zip(A, B) for a, b in zip(ra, rb))
    na = math.sqrt(sum(a * a for r in A for a in r))
    nb = math.sqrt(sum(b * b for r in B for b in r))
    return dot / (na * nb)


def sra_oracle(F, Y, ident, eps=1e-6):
    def unit(rows):
        return [[v / math.sqrt(sum(u * u for u in r)) for v in r] for r in rows]
    MF, MY, MI = gram_loop(unit(F)), gram_loop(unit(Y)), gram_loop(ident)
    a = max(cosine_loop(MF, MY), eps)
    b = max(cosine_loop(MF, MI), eps)
    return -math.log(a / (a + b))


# ---------------------------------------------------------------- router


def test_router_uniform_is_log_s():
    assert float(losses.router_loss(Tensor(np.zeros((5, 4))), onehot([0, 1, 2, 3, 0], 4)).data) == \
        pytest.approx(math.log(4), abs=1e-12)


def test_router_large_margin_goes_to_zero():
    logits = np.full((3, 4), -50.0)
    logits[np.arange(3), [2, 0, 1]] = 50.0
    assert float(losses.router_loss(Tensor(logits), onehot([2, 0, 1], 4)).data) < 1e-12


def test_router_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        logits = rng.standard_normal((7, 4)) * 3
        ids = rng.integers(4, size=7)
        got = float(losses.router_loss(Tensor(logits), onehot(ids, 4)).data)
        assert got == pytest.approx(router_oracle(logits.tolist(), ids), abs=1e-12)


# ---------------------------------------------------------------- classification


def test_bce_zero_logits_is_ln2():
    labels = (np.random.default_rng(0).random((6, 8)) > 0.5).astype(float)
    assert float(losses.classification_loss(Tensor(np.zeros((6, 8))), labels).data) == \
        pytest.approx(math.log(2), abs=1e-12)


def test_bce_saturation():
    labels = (np.random.default_rng(0).random((6, 8)) > 0.5).astype(float)
    logits = np.where(labels == 1, 10.0, -10.0)
    assert float(losses.classification_loss(Tensor(logits), labels).data) < 1e-4


def test_bce_matches_loop():
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = rng.standard_normal((5, 8)) * 4
        labels = (rng.random((5, 8)) > 0.5).astype(float)
        got = float(losses.classification_loss(Tensor(logits), labels).data)
        assert got == pytest.approx(bce_oracle(logits, labels), abs=1e-12)


def test_bce_rejects_bad_labels():
    with pytest.raises(ValueError):
        losses.classification_loss(Tensor(np.zeros((2, 2))), np.full((2, 2), 0.5))
    with pytest.raises(ad.ShapeError):
        losses.classification_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


# ---------------------------------------------------------------- retrieval


def test_retrieval_single_pair_is_zero():
    h = Tensor([[0.3, -1.2, 0.5]])
    assert float(losses.retrieval_loss(h, np.array([[1.0, 2.0, 3.0]])).data) == 0.0


def test_retrieval_identity_logits_closed_form():
    got = float(losses.retrieval_loss(Tensor(np.eye(2)), np.eye(2)).data)
    assert got == pytest.approx(4 * math.log(1 + math.exp(-1)), abs=1e-12)


def test_retrieval_matches_double_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        h, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        tau = float(rng.uniform(0.2, 2.0))
        got = float(losses.retrieval_loss(Tensor(h), y, tau).data)
        assert got == pytest.approx(infonce_oracle(h.tolist(), y.tolist(), tau), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_retrieval_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    h, y = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    p = rng.permutation(n)
    a = float(losses.retrieval_loss(Tensor(h), y).data)
    b = float(losses.retrieval_loss(Tensor(h[p]), y[p]).data)
    assert a == pytest.approx(b, abs=1e-10)
    assert a >= 0


def test_retrieval_rejects_bad_temperature():
    with pytest.raises(ValueError):
        losses.retrieval_loss(Tensor(np.eye(2)), np.eye(2), 0.0)


# ---------------------------------------------------------------- reconstruction


def test_reconstruction_cases():
    y = np.array([[1.0, -2.0, 0.5]])
    assert float(losses.reconstruction_loss(Tensor(y), y, Tensor(y)).data) == 0.0
    rng = np.random.default_rng(4)
    y = rng.standard_normal((4, 3))
    h = rng.standard_normal((4, 3))
    got = float(losses.reconstruction_loss(Tensor(y + 1.0), y, Tensor(h)).data)
    assert got == pytest.approx(1.0 + infonce_oracle(h.tolist(), y.tolist(), 1.0), abs=1e-12)


def test_reconstruction_is_sum_of_components():
    rng = np.random.default_rng(5)
    p, y, h = (rng.standard_normal((5, 3)) for _ in range(3))
    mse = float(np.mean((p - y) ** 2))
    got = float(losses.reconstruction_loss(Tensor(p), y, Tensor(h), 0.5).data)
    assert got == pytest.approx(mse + infonce_oracle(h.tolist(), y.tolist(), 0.5), abs=1e-12)


# ---------------------------------------------------------------- SRA


def test_sra_balanced_case_is_ln2():
    # features, images and identities coincide, so both cosines are exactly 1
    ident = onehot([0, 1], 2)
    got = float(losses.sra_loss(Tensor(ident), ident, ident).data)
    assert got == pytest.approx(math.log(2), abs=1e-12)


def test_sra_limit_with_clamp():
    # M_F = M_Y, and within each subject block the feature Gram sums to zero, so the raw
    # cosine to M_I is exactly 0, clamps to eps, and the loss is -log(1/(1+eps)) ~ 1e-6
    F = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    ident = onehot([0, 0, 1, 1], 2)
    MF = F @ F.T
    MI = ident @ ident.T
    raw_b = np.sum(MF * MI) / (np.linalg.norm(MF) * np.linalg.norm(MI))
    assert raw_b == pytest.approx(0.0, abs=1e-15)
    got = float(losses.sra_loss(Tensor(F), F, ident).data)
    assert got == pytest.approx(-math.log(1.0 / (1.0 + 1e-6)), abs=1e-12)


def test_sra_matches_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        F, Y = rng.standard_normal((6, 5)), rng.standard_normal((6, 4))
        ident = onehot([0, 1, 0, 1, 1, 0], 2)
        got = float(losses.sra_loss(Tensor(F), Y, ident).data)
        assert got == pytest.approx(sra_oracle(F.tolist(), Y.tolist(), ident.tolist()), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sra_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    F, Y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    ident = onehot([0, 1, 2, 0, 1, 2], 3)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = float(losses.sra_loss(Tensor(F), Y, ident).data)
    b = float(losses.sra_loss(Tensor(F @ q), Y, ident).data)
    assert a == pytest.approx(b, abs=1e-12)
    assert a >= 0


def test_sra_monotone_in_a():
    # -log(a / (a + b)) strictly decreases in a for fixed b
    b = 0.3
    vals = [math.log(a + b) - math.log(a) for a in np.linspace(0.05, 1.0, 20)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    # and the loss implements that function of the two clamped cosines
    rng = np.random.default_rng(7)
    F, Y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    ident = onehot([0, 1, 0, 1, 0, 1], 2)
    MF, MY, MI = (t.data for t in losses.relation_matrices(Tensor(F), Y, ident))
    cos = lambda p, q: np.sum(p * q) / (np.linalg.norm(p) * np.linalg.norm(q))
    a, b = cos(MF, MY), cos(MF, MI)
    assert float(losses.sra_loss(Tensor(F), Y, ident).data) == pytest.approx(math.log(a + b) - math.log(a), abs=1e-12)


def test_sra_rejects_degenerate_batches():
    with pytest.raises(ValueError):
        losses.sra_loss(Tensor(np.ones((1, 3))), np.ones((1, 3)), onehot([0], 2))
    with pytest.raises(ValueError, match="single subject"):
        losses.sra_loss(Tensor(np.eye(3)), np.eye(3), onehot([1, 1, 1], 2))
