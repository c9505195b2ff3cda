"""Triplet loss against a triple-loop oracle, cross-entropy, combination."""

import math

import numpy as np
import pytest

import mtsgait.losses as losses
from mtsgait.losses import (LossConfig, batch_all_triplet, combine,
                            cross_entropy, pairwise_sq_dists)
from mtsgait.tensor import Tensor, t_sum

from conftest import gradcheck, rel_err


def brute_triplet(embeddings, labels, margin):
    """Enumerate every (anchor, positive, negative) triple per strip.

    Independent of the vectorized implementation: plain loops, one
    distance at a time, hinge terms collected and averaged over the
    strictly positive ones, strips averaged sequentially.
    """
    b, s, _ = embeddings.shape
    total = None
    for strip in range(s):
        hinges = []
        for a in range(b):
            for p in range(b):
                if p == a or labels[p] != labels[a]:
                    continue
                for n in range(b):
                    if labels[n] == labels[a]:
                        continue
                    d_ap = np.sqrt(
                        ((embeddings[a, strip] - embeddings[p, strip]) ** 2
                         ).sum())
                    d_an = np.sqrt(
                        ((embeddings[a, strip] - embeddings[n, strip]) ** 2
                         ).sum())
                    h = d_ap - d_an + margin
                    hinges.append(h if h > 0 else type(h)(0.0))
        hinges = np.array(hinges)
        nonzero = int((hinges > 0).sum())
        if nonzero == 0:
            continue
        strip_loss = np.sum(hinges) / nonzero
        total = strip_loss if total is None else total + strip_loss
    return 0.0 if total is None else total / s


class TestBatchAllTriplet:
    def test_all_hinges_zero(self):
        emb = np.array([[[0.0]], [[0.1]], [[1.0]]])
        loss, stats = batch_all_triplet(Tensor(emb), [0, 0, 1], 0.2)
        assert loss.item() == 0.0
        assert stats["nonzero_fraction"] == 0.0

    def test_single_active_triplet_value(self):
        emb = np.array([[[0.0]], [[0.5]], [[0.6]]])
        loss, stats = batch_all_triplet(Tensor(emb), [0, 0, 1], 0.2)
        # anchor 0 contributes 0.5 - 0.6 + 0.2 = 0.1; anchor 1 contributes
        # 0.5 - 0.1 + 0.2 = 0.6; batch-all averages the nonzero terms
        assert loss.item() == pytest.approx((0.1 + 0.6) / 2)
        assert stats["triples"] == 2

    @pytest.mark.parametrize("b,s,d,classes", [(6, 1, 3, 2), (8, 4, 2, 3),
                                               (12, 2, 5, 4)])
    def test_matches_brute_force_exactly(self, rng, b, s, d, classes):
        emb = rng.standard_normal((b, s, d))
        labels = rng.integers(0, classes, size=b)
        while len(set(labels[labels == labels[0]])) == b:  # keep >= 2 classes
            labels = rng.integers(0, classes, size=b)
        loss, _ = batch_all_triplet(Tensor(emb), labels, 0.2)
        want = brute_triplet(emb, labels, 0.2)
        assert loss.item() == want  # bitwise: same reductions, same order

    def test_duplicated_batch_with_separated_classes(self):
        emb = np.array([[[0.0]], [[0.1]], [[1.0]], [[1.05]]])
        labels = [0, 0, 1, 1]
        base, _ = batch_all_triplet(Tensor(emb), labels, 0.2)
        dup = np.concatenate([emb, emb])
        dup_loss, _ = batch_all_triplet(Tensor(dup), labels + labels, 0.2)
        assert dup_loss.item() == brute_triplet(dup, labels + labels, 0.2)
        # clone-positive hinges are all zero here, so the average survives
        assert dup_loss.item() == pytest.approx(base.item())

    def test_rigid_rotation_invariance(self, rng):
        emb = rng.standard_normal((8, 2, 4))
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        rotated = emb @ q.T
        a, _ = batch_all_triplet(Tensor(emb), labels, 0.2)
        b, _ = batch_all_triplet(Tensor(rotated), labels, 0.2)
        assert rel_err(a.item(), b.item()) < 1e-9

    def test_degenerate_single_class_batch(self, rng):
        before = losses.degenerate_batch_count
        emb = rng.standard_normal((4, 2, 3))
        loss, stats = batch_all_triplet(Tensor(emb), [5, 5, 5, 5], 0.2)
        assert loss.item() == 0.0
        assert losses.degenerate_batch_count == before + 1
        loss.backward()  # constant zero; nothing to propagate

    def test_gradients_match_finite_differences(self, rng):
        labels = np.array([0, 0, 1, 1, 2, 2])
        emb0 = rng.standard_normal((6, 2, 3))
        gradcheck(lambda e: batch_all_triplet(e, labels, 0.2)[0], emb0,
                  tol=1e-4)

    def test_input_validation(self, rng):
        with pytest.raises(ValueError, match="B, s, d"):
            batch_all_triplet(Tensor(rng.standard_normal((4, 3))), [0] * 4)
        with pytest.raises(ValueError, match="labels"):
            batch_all_triplet(Tensor(rng.standard_normal((4, 2, 3))), [0, 1])


class TestPairwiseSqDists:
    def test_values(self, rng):
        x = rng.standard_normal((5, 3))
        d2 = pairwise_sq_dists(Tensor(x))
        for i in range(5):
            for j in range(5):
                want = ((x[i] - x[j]) ** 2).sum()
                assert d2.data[i, j] == want

    def test_gradients(self, rng):
        x0 = rng.standard_normal((4, 3))
        gradcheck(lambda x: t_sum(pairwise_sq_dists(x) * 0.3), x0)


class TestCrossEntropy:
    def test_uniform_logits_give_log_n(self):
        for n in (2, 5, 11):
            logits = Tensor(np.zeros((3, n)))
            loss = cross_entropy(logits, [0, 1, n - 1])
            assert loss.item() == pytest.approx(math.log(n), rel=1e-6)

    def test_confident_correct_prediction_is_cheap(self):
        logits = Tensor(np.array([[20.0, 0.0], [0.0, 20.0]]))
        assert cross_entropy(logits, [0, 1]).item() < 1e-6

    def test_label_validation(self):
        with pytest.raises(ValueError, match="label"):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ValueError, match="labels"):
            cross_entropy(Tensor(np.zeros((2, 3))), [0])

    def test_gradients(self, rng):
        labels = np.array([0, 2, 1, 2])
        logits0 = rng.standard_normal((4, 3))
        gradcheck(lambda l: cross_entropy(l, labels), logits0)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.array([[1.0, 0.0, -1.0]]), requires_grad=True)
        cross_entropy(logits, [1]).backward()
        e = np.exp([1.0, 0.0, -1.0])
        soft = e / e.sum()
        soft[1] -= 1.0
        np.testing.assert_allclose(logits.grad[0], soft, rtol=1e-6)


class TestCombine:
    def test_weighted_sum(self):
        total = combine(Tensor(np.array(2.0)), Tensor(np.array(3.0)),
                        alpha=1.0, beta=0.1)
        assert total.item() == pytest.approx(2.3)

    def test_beta_zero_is_pure_triplet(self):
        total = combine(Tensor(np.array(2.0)), Tensor(np.array(99.0)),
                        alpha=0.5, beta=0.0)
        assert total.item() == pytest.approx(1.0)

    def test_config_validation(self):
        assert LossConfig().margin == 0.2
        assert LossConfig().alpha == 1.0 and LossConfig().beta == 0.1
        with pytest.raises(ValueError):
            LossConfig(margin=-0.1)
        with pytest.raises(ValueError):
            LossConfig(beta=-1.0)
