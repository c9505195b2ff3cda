"""Training losses: batch-all triplet per strip, cross-entropy, combination.

The triplet loss runs independently on each horizontal strip of the
embeddings and averages the per-strip values. Within a strip, every
(anchor, positive, negative) triple contributes a hinge on euclidean
distances, and the sum is divided by the number of triples with strictly
positive hinge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, accumulate_grad, add, gather_pairs, narrow, relu, reshape, sqrt, t_sum

logger = logging.getLogger(__name__)

# Incremented whenever a degenerate batch (fewer than two classes, or no
# valid triples) forces the loss to 0; exposed for trainer diagnostics.
degenerate_batch_count = 0


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"LossConfig: margin must be >= 0, got {self.margin}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(
                f"LossConfig: weights must be >= 0, got alpha={self.alpha}, "
                f"beta={self.beta}")


def pairwise_sq_dists(x: Tensor) -> Tensor:
    """All-pairs squared euclidean distances of row vectors [B, d] -> [B, B]."""
    xd = x.data
    if xd.ndim != 2:
        raise ValueError(f"pairwise_sq_dists: expected [B, d], got {xd.shape}")
    diff = xd[:, None, :] - xd[None, :, :]
    out = (diff * diff).sum(axis=2)

    def bw(g):
        rs = g.sum(axis=1)
        cs = g.sum(axis=0)
        mixed = (g + g.T) @ xd
        accumulate_grad(x, 2.0 * ((rs + cs)[:, None] * xd - mixed))

    return Tensor.from_op(out, (x,), bw)


def _triplet_index_arrays(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices (a, p, n) of every valid triple, in anchor-major order."""
    same = labels[:, None] == labels[None, :]
    b = labels.shape[0]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    valid = pos[:, :, None] & neg[:, None, :]
    return np.nonzero(valid)


def _strip_triplet_loss(emb: Tensor, anchors, positives, negatives,
                        margin: float) -> tuple[Tensor | None, int, int]:
    """(loss, nonzero_triples, total_triples) for one strip's [B, d] rows."""
    d2 = relu(pairwise_sq_dists(emb))  # clamp roundoff; exact zeros stay zero
    d = sqrt(d2)
    d_ap = gather_pairs(d, anchors, positives)
    d_an = gather_pairs(d, anchors, negatives)
    hinge = relu(add(add(d_ap, -d_an), margin))
    n_nonzero = int(np.count_nonzero(hinge.data > 0))
    if n_nonzero == 0:
        return None, 0, anchors.shape[0]
    return t_sum(hinge) / n_nonzero, n_nonzero, anchors.shape[0]


def batch_all_triplet(embeddings: Tensor, labels, margin: float = 0.2
                      ) -> tuple[Tensor, dict]:
    """Batch-all triplet loss over strip embeddings [B, s, d].

    Returns the scalar loss plus a stats dict with the fraction of
    nonzero-hinge triples. Batches with a single class, or where every
    hinge is zero, yield a constant 0 with no gradient; these are counted
    in `degenerate_batch_count`.
    """
    global degenerate_batch_count
    if embeddings.ndim != 3:
        raise ValueError(
            f"batch_all_triplet: expected [B, s, d], got {embeddings.shape}")
    b, s, _ = embeddings.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(
            f"batch_all_triplet: {labels.shape[0] if labels.ndim else 0} "
            f"labels for batch of {b}")
    anchors, positives, negatives = _triplet_index_arrays(labels)
    if anchors.size == 0:
        degenerate_batch_count += 1
        logger.warning("batch_all_triplet: degenerate batch (no valid "
                       "triples); loss defined as 0")
        zero = Tensor(np.zeros((), dtype=embeddings.dtype))
        return zero, {"nonzero_fraction": 0.0, "triples": 0}

    total = None
    nonzero = 0
    possible = 0
    for i in range(s):
        strip = reshape(narrow(embeddings, 1, i, 1), (b, embeddings.shape[2]))
        loss_i, nz, tot = _strip_triplet_loss(strip, anchors, positives,
                                              negatives, margin)
        nonzero += nz
        possible += tot
        if loss_i is not None:
            total = loss_i if total is None else add(total, loss_i)
    if total is None:
        degenerate_batch_count += 1
        zero = Tensor(np.zeros((), dtype=embeddings.dtype))
        return zero, {"nonzero_fraction": 0.0, "triples": int(possible)}
    loss = total / s
    stats = {"nonzero_fraction": nonzero / possible if possible else 0.0,
             "triples": int(possible)}
    return loss, stats


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of logits [B, K] against integer labels."""
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"cross_entropy: expected [B, K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    b, k = ld.shape
    if labels.shape != (b,):
        raise ValueError(
            f"cross_entropy: {labels.size} labels for batch of {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"cross_entropy: label outside [0, {k - 1}]")
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    out = np.asarray(-log_probs[np.arange(b), labels].mean(), dtype=ld.dtype)

    def bw(g):
        soft = np.exp(log_probs)
        soft[np.arange(b), labels] -= 1.0
        accumulate_grad(logits, (g / b) * soft)

    return Tensor.from_op(out, (logits,), bw)


def combine(l_tri: Tensor, l_ce: Tensor, alpha: float = 1.0,
            beta: float = 0.1) -> Tensor:
    """Weighted total loss alpha * triplet + beta * cross-entropy."""
    return add(l_tri * alpha, l_ce * beta)
