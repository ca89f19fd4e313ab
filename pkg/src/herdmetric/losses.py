"""Metric-learning and classification losses with analytic gradients.

Every ``*_grad`` function returns the loss value together with its gradient
with respect to each input vector. Distances are plain Euclidean; where the
distance is exactly zero its gradient is taken as the zero subgradient.

The contrastive loss is linear in the distance for similar pairs (no square),
matching the formulation this package reproduces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .linalg import as_vec, log_softmax, softmax

METRIC_BASES = ("TL", "RTL")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    lam: float = 0.01
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigurationError("margin must be > 0")
        if not self.lam >= 0:
            raise ConfigurationError("lambda must be >= 0")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")


DEFAULT = LossConfig()


def _same_shape(*vs):
    vs = [as_vec(v) for v in vs]
    if any(v.shape != vs[0].shape for v in vs):
        raise DimensionError("vectors differ in length")
    return vs


def _dist_and_unit(a, b):
    diff = a - b
    d = float(np.sqrt(diff @ diff))
    return d, (diff / d if d > 0 else np.zeros_like(diff))


def contrastive_grad(x1, x2, Y, cfg: LossConfig = DEFAULT):
    """Y=0 for a similar pair, Y=1 for a dissimilar pair."""
    x1, x2 = _same_shape(x1, x2)
    if Y not in (0, 1):
        raise ValueError("Y must be 0 (similar) or 1 (dissimilar)")
    d, u = _dist_and_unit(x1, x2)
    if Y == 0:
        value, dd = 0.5 * d, 0.5
    else:
        gap = cfg.margin - d
        value, dd = (0.5 * gap, -0.5) if gap > 0 else (0.0, 0.0)
    return value, dd * u, -dd * u


def contrastive(x1, x2, Y, cfg: LossConfig = DEFAULT) -> float:
    return contrastive_grad(x1, x2, Y, cfg)[0]


def triplet_grad(xa, xp, xn, cfg: LossConfig = DEFAULT):
    xa, xp, xn = _same_shape(xa, xp, xn)
    dap, uap = _dist_and_unit(xa, xp)
    dan, uan = _dist_and_unit(xa, xn)
    h = dap - dan + cfg.margin
    if h <= 0:
        z = np.zeros_like(xa)
        return 0.0, z, z.copy(), z.copy()
    return h, uap - uan, -uap, uan


def triplet(xa, xp, xn, cfg: LossConfig = DEFAULT) -> float:
    return triplet_grad(xa, xp, xn, cfg)[0]


def reciprocal_triplet_grad(xa, xp, xn, cfg: LossConfig = DEFAULT):
    """d(a,p) + 1/(d(a,n) + epsilon). No margin."""
    xa, xp, xn = _same_shape(xa, xp, xn)
    dap, uap = _dist_and_unit(xa, xp)
    dan, uan = _dist_and_unit(xa, xn)
    inv = 1.0 / (dan + cfg.epsilon)
    g = -inv * inv
    return dap + inv, uap + g * uan, -uap, -g * uan


def reciprocal_triplet(xa, xp, xn, cfg: LossConfig = DEFAULT) -> float:
    return reciprocal_triplet_grad(xa, xp, xn, cfg)[0]


def softmax_ce_grad(logits, class_index: int):
    z = as_vec(logits)
    if not 0 <= class_index < z.shape[0]:
        raise IndexError(f"class index {class_index} out of range for {z.shape[0]} logits")
    value = -float(log_softmax(z)[class_index])
    g = softmax(z)
    g[class_index] -= 1.0
    return value, g


def softmax_ce(logits, class_index: int) -> float:
    return softmax_ce_grad(logits, class_index)[0]


def combined(base: str, softmax_value: float, metric_value: float,
             cfg: LossConfig = DEFAULT) -> float:
    if base not in METRIC_BASES:
        raise ValueError(f"base must be one of {METRIC_BASES}")
    return softmax_value + cfg.lam * metric_value


def batch_softmax_ce(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    n = logits.shape[0]
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise IndexError("class index out of range")
    logp = log_softmax(logits)
    value = -float(logp[np.arange(n), targets].mean())
    g = np.exp(logp)
    g[np.arange(n), targets] -= 1.0
    return value, g / n
