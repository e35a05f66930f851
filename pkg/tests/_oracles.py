"""Independent oracles shared by the test modules: finite differences,
brute-force nearest neighbors, and an explicit reduced softmax. These stay
deliberately dumb and never call into the code paths they check."""

from __future__ import annotations

import numpy as np


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise, float64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        above = f(x)
        flat[i] = orig - eps
        below = f(x)
        flat[i] = orig
        gflat[i] = (above - below) / (2.0 * eps)
    return grad


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Max elementwise |a - b| / max(1e-8, |a|, |b|)."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(1e-8, np.maximum(np.abs(approx), np.abs(exact)))
    return float(np.max(np.abs(approx - exact) / denom))


def brute_force_knn(
    embeddings: np.ndarray, ids: np.ndarray, q: np.ndarray, k: int
) -> list[tuple[int, float]]:
    """Full sort by (distance, id); the reference for every retrieval test."""
    d = np.sqrt(((embeddings.astype(np.float64) - q.astype(np.float64)) ** 2).sum(axis=1))
    order = sorted(range(len(ids)), key=lambda i: (d[i], ids[i]))
    return [(int(ids[i]), float(d[i])) for i in order[:k]]


def explicit_masked_ce(logits: np.ndarray, target: int, mask: set[int]) -> float:
    """Cross-entropy recomputed by gathering the surviving logits and running
    a plain softmax over just those entries, in float64."""
    keep = [i for i in range(len(logits)) if i not in mask]
    z = np.asarray(logits, dtype=np.float64)[keep]
    p = np.exp(z - z.max())
    p /= p.sum()
    return float(-np.log(p[keep.index(target)]))
