"""Non-learned encoders the encoding layer generalises: BoW, VLAD, pooling, K-means."""

from __future__ import annotations

import numpy as np

from .encoding import Assignment, residuals
from .numeric import Rng, ShapeError, as_mat, colsum, ordered_sum


def _sq_dists(X, C) -> np.ndarray:
    R = residuals(X, C)
    return ordered_sum(R * R, axis=2)


def hard_assign(X, C) -> np.ndarray:
    """Index of the nearest codeword for every descriptor (ties -> lowest index)."""
    # argmin returns the first occurrence of the minimum
    return np.argmin(_sq_dists(X, C), axis=1)


def bow_histogram(idx, K: int) -> np.ndarray:
    """Hard bag-of-words counts, shape (1, K)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise ValueError(f"assignment index outside [0, {K})")
    onehot = np.zeros((idx.shape[0], K))
    onehot[np.arange(idx.shape[0]), idx] = 1.0
    return colsum(onehot) if idx.size else np.zeros((1, K))


def soft_bow(A) -> np.ndarray:
    """Soft bag-of-words: column sums of the assignment matrix."""
    if isinstance(A, Assignment):
        A = A.A
    return colsum(A)


def vlad(X, C) -> np.ndarray:
    """Sum of residuals to the nearest codeword, K x D, no normalisation."""
    X = as_mat(X, "descriptors")
    C = as_mat(C, "codebook")
    R = residuals(X, C)
    idx = np.argmin(ordered_sum(R * R, axis=2), axis=1)
    mask = np.zeros(R.shape[:2])
    mask[np.arange(X.shape[0]), idx] = 1.0
    return ordered_sum(mask[:, :, None] * R, axis=0)


def sum_pool(X) -> np.ndarray:
    X = as_mat(X, "descriptors")
    if X.shape[0] < 1:
        raise ShapeError("sum_pool needs at least one descriptor")
    return colsum(X)


def avg_pool(X) -> np.ndarray:
    X = as_mat(X, "descriptors")
    return sum_pool(X) / X.shape[0]


def kmeans_objective(X, C) -> float:
    return float(ordered_sum(_sq_dists(X, C).min(axis=1), axis=0))


def kmeans(X, K: int, max_iters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm seeded from K distinct sample rows.

    Stops after ``max_iters`` updates or once assignments stop changing.  An
    empty cluster is re-seeded to the point farthest from its own centroid;
    ties and multiple empty clusters resolve in ascending index order.
    """
    X = as_mat(X, "descriptors")
    N = X.shape[0]
    if K < 1 or N < K:
        raise ValueError(f"kmeans needs 1 <= K <= N, got K={K}, N={N}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    C = X[np.sort(Rng(seed).permutation(N)[:K])].copy()
    idx = hard_assign(X, C)
    for _ in range(max_iters):
        counts = np.bincount(idx, minlength=K)
        new_C = C.copy()
        for k in range(K):
            if counts[k]:
                new_C[k] = ordered_sum(X[idx == k], axis=0) / counts[k]
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            dist = _sq_dists(X, C)[np.arange(N), idx]
            taken: set[int] = set()
            for k in empty:
                order = np.argsort(-dist, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                new_C[k] = X[pick]
        C = new_C
        new_idx = hard_assign(X, C)
        if np.array_equal(new_idx, idx):
            break
        idx = new_idx
    return C
