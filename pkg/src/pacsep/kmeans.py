"""Deterministic K-means over standardized features.

Seeded k-means++ initialization, Lloyd iterations with empty-cluster
reseeding from the farthest point, and per-dimension standardization that is
stored with the model so assignment happens in the same space as fitting.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError


@dataclass
class KMeansModel:
    centroids: np.ndarray          # [K x D], standardized space
    feature_mean: np.ndarray       # [D]
    feature_std: np.ndarray        # [D], strictly positive
    seed: int
    inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _standardize(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    if np.all(std == 0.0):
        raise InputError("degenerate features: every dimension is constant")
    std = np.where(std > 0.0, std, 1.0)  # constant dims carry no information
    return (features - mean) / std, mean, std


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances [N x K], clipped at zero."""
    cross = x @ centroids.T
    d = (x**2).sum(axis=1)[:, None] + (centroids**2).sum(axis=1)[None, :] - 2.0 * cross
    return np.maximum(d, 0.0)


def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass on already-chosen points; spread uniformly
            centroids[i] = x[rng.integers(n)]
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total))
            pick = min(pick, n - 1)
            centroids[i] = x[pick]
        closest = np.minimum(closest, _sq_dists(x, centroids[i : i + 1])[:, 0])
    return centroids


def kmeans_fit(
    features: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 300,
    tol: float = 1e-6,
) -> KMeansModel:
    """Fit a k-cluster model with k-means++ seeding and Lloyd iterations.

    Inertia (total squared distance in standardized space) is recorded after
    every assignment and is non-increasing; empty clusters are reseeded from
    the point farthest from its assigned centroid.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise InputError("feature matrix must be [N x D]")
    n = features.shape[0]
    if k < 2:
        raise InputError("need at least 2 clusters")
    if n < k:
        raise InputError(f"cannot fit {k} clusters to {n} points")
    if not np.all(np.isfinite(features)):
        raise NumericalError("non-finite feature values")
    x, mean, std = _standardize(features)
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(x, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.intp)
    for _ in range(max_iters):
        d = _sq_dists(x, centroids)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), labels].sum()))
        new_centroids = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for empty in np.nonzero(~nonempty)[0]:
            # farthest point from its centroid becomes the new seed
            far = int(np.argmax(d[np.arange(n), labels]))
            new_centroids[empty] = x[far]
            d[far, :] = 0.0  # do not pick the same point twice
        move = np.max(np.abs(new_centroids - centroids))
        centroids = new_centroids
        if move < tol:
            break
    # final assignment so stored inertia matches the returned centroids
    d = _sq_dists(x, centroids)
    labels = np.argmin(d, axis=1)
    final = float(d[np.arange(n), labels].sum())
    history.append(final)
    return KMeansModel(
        centroids=centroids,
        feature_mean=mean,
        feature_std=std,
        seed=seed,
        inertia=final,
        inertia_history=history,
    )


def kmeans_assign(model: KMeansModel, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels in standardized space; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.shape[1] != model.dim:
        raise InputError(
            f"feature dim {features.shape[1]} != model dim {model.dim}"
        )
    x = (features - model.feature_mean) / model.feature_std
    return np.argmin(_sq_dists(x, model.centroids), axis=1)


def assignment_inertia(model: KMeansModel, features: np.ndarray) -> float:
    """Total squared distance of `features` to their assigned centroids."""
    features = np.asarray(features, dtype=np.float64)
    x = (features - model.feature_mean) / model.feature_std
    d = _sq_dists(x, model.centroids)
    return float(d[np.arange(x.shape[0]), np.argmin(d, axis=1)].sum())


def relabel_from_latents(latents: np.ndarray, k: int, seed: int,
                         max_iters: int = 300, tol: float = 1e-6) -> KMeansModel:
    """Cluster transformer-layer token features; same procedure as kmeans_fit."""
    return kmeans_fit(latents, k, seed, max_iters=max_iters, tol=tol)
