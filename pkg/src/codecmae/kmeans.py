"""k-means with k-means++ seeding and Lloyd iterations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class KMeansModel:
    centroids: np.ndarray
    distortion_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def squared_distances(points: np.ndarray, centroids: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Pairwise squared Euclidean distances via the ``|x|^2 - 2 x.c + |c|^2`` expansion."""
    c_sq = np.einsum("kd,kd->k", centroids, centroids)
    out = np.empty((points.shape[0], centroids.shape[0]), dtype=np.float64)
    for lo in range(0, points.shape[0], chunk):
        p = points[lo:lo + chunk]
        d = np.einsum("nd,nd->n", p, p)[:, None] - 2.0 * (p @ centroids.T) + c_sq[None, :]
        out[lo:lo + chunk] = np.maximum(d, 0.0)
    return out


def nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid (first index on ties) and its squared distance."""
    d = squared_distances(points, centroids)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(points.shape[0]), labels]


def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = squared_distances(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # fewer distinct points than clusters; duplicates are harmless
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0.0, total), side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, squared_distances(x, centers[j:j + 1])[:, 0])
    return centers


def kmeans_fit(points, k: int, rng: np.random.Generator, max_iter: int = 300) -> KMeansModel:
    """Fit ``k`` centroids; stops at an assignment fixpoint or after ``max_iter`` Lloyd steps.

    Empty clusters are re-seeded with the points farthest from their current
    centroid, which can only lower the distortion.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"points must be N x D, got shape {x.shape}")
    if k < 2:
        raise TrainingError(f"k must be >= 2, got {k}")
    if x.shape[0] < k:
        raise TrainingError(f"need at least k={k} points, got {x.shape[0]}")
    centroids = _plusplus_init(x, k, rng)
    labels, dist = nearest(x, centroids)
    history = [float(dist.mean())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        order = np.argsort(labels, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[filled]
        centroids[filled] = np.add.reduceat(x[order], starts, axis=0) / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            far = np.argsort(-dist, kind="stable")[:empty.size]
            centroids[empty] = x[far]
        new_labels, dist = nearest(x, centroids)
        history.append(float(dist.mean()))
        log.debug("kmeans iter %d distortion %.6g", n_iter, history[-1])
        if np.array_equal(new_labels, labels) and not empty.size:
            break
        labels = new_labels
    return KMeansModel(centroids, history, n_iter)


def kmeans_assign(model: KMeansModel, points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError(f"points of shape {x.shape} do not match centroid dim {model.dim}")
    return nearest(x, model.centroids)[0]
