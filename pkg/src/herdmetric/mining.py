"""Mini-batch sampling and online triplet mining.

A batch holds P classes with K instances each. Batch-hard mining treats every
member as an anchor once and pairs it with its farthest same-class member and
its nearest other-class member. Ties go to the lowest batch index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .errors import MiningError, SamplingError
from .linalg import euclidean_distance, pairwise_distances


@dataclass
class TripletBatch:
    embeddings: np.ndarray
    labels: np.ndarray
    P: int
    K: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.shape[0] != self.P * self.K or self.labels.shape[0] != self.P * self.K:
            raise MiningError(f"batch must hold P*K={self.P * self.K} members")
        classes, counts = np.unique(self.labels, return_counts=True)
        if len(classes) != self.P or np.any(counts != self.K):
            raise MiningError("each of the P classes must appear exactly K times")

    @classmethod
    def from_labels(cls, embeddings, labels):
        labels = np.asarray(labels)
        classes, counts = np.unique(labels, return_counts=True)
        return cls(embeddings, labels, len(classes), int(counts[0]))


def sample_batch(train_pool: dict, P: int, K: int, rng: np.random.Generator):
    """Draw P classes, then K distinct instances of each, without replacement.

    ``train_pool`` maps label -> sequence of instance ids. Returns
    ``(instance_ids, labels)`` arrays of length P*K, grouped by class.
    """
    if P < 2:
        raise SamplingError("P must be >= 2 so that negatives exist")
    if K < 1:
        raise SamplingError("K must be >= 1")
    eligible = sorted(c for c, ids in train_pool.items() if len(ids) >= K)
    if len(eligible) < P:
        raise SamplingError(f"need {P} classes with >= {K} instances, have {len(eligible)}")
    chosen = rng.choice(len(eligible), size=P, replace=False)
    ids, labels = [], []
    for ci in chosen:
        c = eligible[ci]
        pool = list(train_pool[c])
        pick = rng.choice(len(pool), size=K, replace=False)
        ids.extend(pool[j] for j in pick)
        labels.extend([c] * K)
    return np.array(ids), np.array(labels)


def _check_positives(batch: TripletBatch):
    if batch.K < 2:
        raise MiningError("K=1: no positive exists for any anchor")


def hardest_pairs(batch: TripletBatch, dist: np.ndarray | None = None):
    """Vectorised batch-hard selection: (hardest_positive, hardest_negative) index arrays."""
    _check_positives(batch)
    d = pairwise_distances(batch.embeddings) if dist is None else dist
    lab = batch.labels
    same = lab[:, None] == lab[None, :]
    pos_mask = same & ~np.eye(len(lab), dtype=bool)
    hp = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    hn = np.argmin(np.where(~same, d, np.inf), axis=1)
    return hp, hn


def brute_force_hard(batch: TripletBatch):
    """Exhaustive per-anchor scan; the reference for :func:`hardest_pairs`."""
    _check_positives(batch)
    e, lab = batch.embeddings, batch.labels
    n = len(lab)
    hp, hn = np.empty(n, dtype=int), np.empty(n, dtype=int)
    for a in range(n):
        best_p, best_pd = -1, -1.0
        best_n, best_nd = -1, float("inf")
        for j in range(n):
            if j == a:
                continue
            dj = euclidean_distance(e[a], e[j])
            if lab[j] == lab[a]:
                if dj > best_pd:
                    best_p, best_pd = j, dj
            elif dj < best_nd:
                best_n, best_nd = j, dj
        hp[a], hn[a] = best_p, best_n
    return hp, hn


def _triplet_fn(base: str):
    if base == "TL":
        return losses.triplet_grad
    if base == "RTL":
        return losses.reciprocal_triplet_grad
    raise ValueError(f"base must be one of {losses.METRIC_BASES}, got {base!r}")


def batch_hard_loss(batch: TripletBatch, cfg: losses.LossConfig = losses.DEFAULT,
                    base: str = "TL", *, with_grad: bool = False):
    """Batch-hard loss summed over all P*K anchors.

    Returns ``(loss, hardest_positive, hardest_negative)`` and, with
    ``with_grad``, the gradient w.r.t. the embedding matrix as a fourth item.
    """
    fn = _triplet_fn(base)
    hp, hn = hardest_pairs(batch)
    e = batch.embeddings
    total = 0.0
    grad = np.zeros_like(e)
    for a in range(len(e)):
        v, ga, gp, gn = fn(e[a], e[hp[a]], e[hn[a]], cfg)
        total += v
        grad[a] += ga
        grad[hp[a]] += gp
        grad[hn[a]] += gn
    if with_grad:
        return total, hp, hn, grad
    return total, hp, hn


def batch_all_loss(batch: TripletBatch, cfg: losses.LossConfig = losses.DEFAULT,
                   base: str = "TL", *, with_grad: bool = False):
    """Mean loss over every valid triplet whose loss is nonzero (0 if none)."""
    _check_positives(batch)
    fn = _triplet_fn(base)
    e, lab = batch.embeddings, batch.labels
    total, count = 0.0, 0
    grad = np.zeros_like(e)
    for a in range(len(e)):
        for p in np.flatnonzero(lab == lab[a]):
            if p == a:
                continue
            for n in np.flatnonzero(lab != lab[a]):
                v, ga, gp, gn = fn(e[a], e[p], e[n], cfg)
                if v > 0:
                    total += v
                    count += 1
                    grad[a] += ga
                    grad[p] += gp
                    grad[n] += gn
    value = total / count if count else 0.0
    if with_grad:
        return value, (grad / count if count else grad)
    return value


def batch_contrastive_loss(embeddings, labels, cfg: losses.LossConfig = losses.DEFAULT):
    """Mean contrastive loss over all unordered pairs in a batch, with gradient."""
    e = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(labels)
    grad = np.zeros_like(e)
    total, count = 0.0, 0
    for i in range(len(e)):
        for j in range(i + 1, len(e)):
            v, gi, gj = losses.contrastive_grad(e[i], e[j], int(lab[i] != lab[j]), cfg)
            total += v
            grad[i] += gi
            grad[j] += gj
            count += 1
    if count == 0:
        return 0.0, grad
    return total / count, grad / count
