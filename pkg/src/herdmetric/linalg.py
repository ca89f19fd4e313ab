"""Small dense-numerics helpers used throughout the package.

Everything works on float64 numpy arrays. Distances are plain Euclidean
(never squared) so the losses and the kNN classifier agree on one metric.

Random streams come from :class:`numpy.random.Generator` backed by PCG64, a
permuted congruential generator whose output for a given seed is fixed by
the numpy stream-compatibility policy. Child seeds are derived with
:class:`numpy.random.SeedSequence` from integer keys, so a tuple such as
``(master_seed, ratio_index, repetition)`` always names the same stream.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


def make_rng(seed, *keys) -> np.random.Generator:
    """Return a PCG64 generator seeded from ``seed`` and optional integer keys."""
    return np.random.Generator(np.random.PCG64(child_seed(seed, *keys)))


def child_seed(seed, *keys) -> int:
    """Deterministically derive a 64-bit seed from ``seed`` and ``keys``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DimensionError("vector contains non-finite entries")
    return v


def euclidean_distance(a, b) -> float:
    a, b = as_vec(a), as_vec(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_distances(x, y=None) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``x`` and ``y``.

    Computed from explicit differences rather than the Gram-matrix identity so
    that coincident rows give exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = x if y is None else np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"incompatible shapes {x.shape} and {y.shape}")
    out = np.empty((x.shape[0], y.shape[0]))
    step = max(1, 2_000_000 // max(1, y.shape[0] * x.shape[1]))
    for i in range(0, x.shape[0], step):
        diff = x[i:i + step, None, :] - y[None, :, :]
        out[i:i + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def pca_project_2d(points) -> np.ndarray:
    """Project points onto their top two principal components.

    Returns an ``(m, 2)`` array. Each component's sign is fixed so that its
    first nonzero loading is positive, which makes the output a deterministic
    function of the input.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError("pca_project_2d needs at least 2 points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    comps = np.zeros((x.shape[1], 2))
    for j, idx in enumerate(order[:2]):
        if evals[idx] <= 1e-12 * max(evals.max(), 1e-300):
            continue  # zero-variance direction projects to 0
        c = evecs[:, idx]
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if nz.size and c[nz[0]] < 0:
            c = -c
        comps[:, j] = c
    out = centered @ comps
    out[np.abs(out) < 1e-12] = 0.0
    return out
