"""Unnormalized spectral clustering and component-count diagnostics.

Vertices are embedded by the rows of the matrix of the k smallest Laplacian
eigenvectors and grouped by seeded k-means.  The k-means plumbing is fixed:
++-style initialization, 10 restarts reduced by minimum inertia (ties by
restart index), 300-iteration cap, relative inertia tolerance 1e-6.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .graphs import WeightMatrix, laplacian, n_components
from .spectra import smallest_eigenpairs

_RESTARTS = 10
_MAX_ITER = 300
_REL_TOL = 1e-6


@dataclass(frozen=True)
class ClusterAssignment:
    """Labels in 1..k, final centroids and the sum of squared distances."""

    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = X[rng.integers(n, size=k - i)]
            break
        centers[i] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    return centers


def _lloyd(X: np.ndarray, centers: np.ndarray, k: int):
    inertia_prev = np.inf
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(_MAX_ITER):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(X.shape[0]), labels].sum())
        for i in range(k):
            mask = labels == i
            if mask.any():
                centers[i] = X[mask].mean(axis=0)
        if inertia_prev - inertia <= _REL_TOL * max(inertia_prev, 1e-300):
            break
        inertia_prev = inertia
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(X.shape[0]), labels].sum())
    return labels, centers, inertia


def kmeans(X: np.ndarray, k: int, seed: int) -> ClusterAssignment:
    """Seeded k-means with ++ initialization and parallel restarts."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    children = np.random.SeedSequence(seed).spawn(_RESTARTS)

    def one(idx):
        rng = np.random.default_rng(children[idx])
        labels, centers, inertia = _lloyd(X, _kmeans_pp_init(X, k, rng), k)
        return inertia, idx, labels, centers

    with ThreadPoolExecutor() as pool:
        results = list(pool.map(one, range(_RESTARTS)))
    inertia, _, labels, centers = min(results, key=lambda r: (r[0], r[1]))
    return ClusterAssignment(labels=labels.astype(np.int64) + 1,
                             centroids=centers, inertia=inertia)


def spectral_clustering(W: WeightMatrix, k: int, seed: int = 0) -> ClusterAssignment:
    """Partition the graph into k clusters from the low Laplacian eigenvectors."""
    if not 1 <= k <= W.n:
        raise ValueError(f"k must be in [1, {W.n}]")
    _, vecs = smallest_eigenpairs(laplacian(W), k)
    return kmeans(vecs, k, seed)


def component_count(W: WeightMatrix) -> int:
    """Connected components by graph traversal.

    Equals the kernel dimension of the Laplacian at tolerance; the agreement
    is asserted by the property suite, not recomputed here.
    """
    return n_components(W.pattern)
