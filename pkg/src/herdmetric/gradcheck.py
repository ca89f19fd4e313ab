"""Finite-difference gradient checks for the full network."""
import numpy as np

from herdmetric import embednet, mining
from herdmetric.embednet import ClassHead, EmbedNet
from herdmetric.linalg import pairwise_distances
from herdmetric.losses import LossConfig

KINK_TOL = 1e-3


def _near_kink(net, head, images, labels, kind, cfg):
    emb, cache = net.forward_batch(images)
    caches = cache[0]
    for (c, _), i in zip(caches, range(len(net.widths))):
        cols = c[0]
        w = net.params[f"conv{i}.w"].reshape(net.widths[i], -1)
        z = np.matmul(w, cols) + net.params[f"conv{i}.b"][None, :, None]
        if np.min(np.abs(z)) < KINK_TOL:
            return True
    base = embednet.metric_base(kind)
    if base is not None or kind == "contrastive":
        d = pairwise_distances(emb)
        n = len(labels)
        off = d[~np.eye(n, dtype=bool)]
        if np.min(off) < KINK_TOL:
            return True
        same = labels[:, None] == labels[None, :]
        for a in range(n):
            pos = np.sort(d[a][same[a] & (np.arange(n) != a)])
            neg = np.sort(d[a][~same[a]])
            if len(pos) > 1 and pos[-1] - pos[-2] < KINK_TOL:
                return True
            if len(neg) > 1 and neg[1] - neg[0] < KINK_TOL:
                return True
            if base == "TL" and abs(pos[-1] - neg[0] + cfg.margin) < KINK_TOL:
                return True
        if kind == "contrastive" and np.min(np.abs(off - cfg.margin)) < KINK_TOL:
            return True
    return False


def random_config(rng, kind, cfg):
    """A small random net/head/batch that keeps clear of every kink."""
    while True:
        seed = int(rng.integers(0, 2**31))
        net = EmbedNet(widths=(2, 2, 2), embed_dim=8, in_size=16, seed=seed)
        for p in net.params.values():
            p += rng.normal(scale=0.05, size=p.shape)
        labels = np.array([3, 3, 8, 8])
        head = ClassHead(8, [3, 8], seed=seed) if embednet.uses_head(kind) else None
        images = rng.uniform(0, 1, size=(4, 16, 16))
        if not _near_kink(net, head, images, labels, kind, cfg):
            return net, head, images, labels


def loss_only(net, head, images, labels, kind, cfg):
    emb = net.forward_batch(images)[0]
    return embednet.embedding_loss(emb, labels, kind, cfg, head)[0]


def check(net, head, images, labels, kind, cfg, h=1e-5, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    The denominator never drops below ``floor * max(1, |loss|)``: a component
    whose true gradient is zero would otherwise be judged on pure round-off,
    which grows with the size of the loss.
    """
    value, grads = embednet.backward(net, head, images, labels, kind, cfg)
    floor = floor * max(1.0, abs(value))
    params = dict(net.params)
    if head is not None:
        params.update(head.params)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_only(net, head, images, labels, kind, cfg)
            flat[j] = orig - h
            fm = loss_only(net, head, images, labels, kind, cfg)
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            err = abs(fd - g[j]) / max(abs(fd), abs(g[j]), floor)
            worst = max(worst, err)
    return worst
