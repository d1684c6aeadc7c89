"""Server-output clustering and target-anchor selection.

The recorded server outputs are grouped into one cluster per class with plain
Lloyd k-means (k-means++ seeding, several restarts, deterministic under a
seed). The attacker then routes a handful of auxiliary samples of the target
class through surrogate + server and picks the centroid with the smallest
summed L2 distance to those probes — that centroid becomes the anchor the
backdoor later steers triggered inputs toward.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigurationError, DimensionError


@dataclass
class ClusterModel:
    centroids: np.ndarray  # float64 [K, D]
    assignments: np.ndarray  # int64 [N]
    inertia: float
    inertia_history: list = field(default_factory=list)


@dataclass
class AnchorEmbedding:
    vector: np.ndarray  # float64 [D]
    cluster_id: int
    distances: np.ndarray  # float64 [K], summed distance per centroid


def _sq_dists(points, centroids):
    # ||x - c||^2 via the expanded product; clipped since cancellation can
    # leave tiny negatives
    d = (
        (points * points).sum(axis=1)[:, None]
        + (centroids * centroids).sum(axis=1)[None, :]
        - 2.0 * points @ centroids.T
    )
    return np.maximum(d, 0.0)


def _kmeanspp_init(points, k, rng):
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[i] = points[rng.integers(n)]  # all mass on existing centroids
        else:
            r = rng.random() * total
            centroids[i] = points[np.searchsorted(np.cumsum(closest), r)]
        closest = np.minimum(closest, _sq_dists(points, centroids[i : i + 1]).ravel())
    return centroids


def _lloyd(points, k, max_iters, tol, rng):
    centroids = _kmeanspp_init(points, k, rng)
    history = []
    assignments = np.zeros(len(points), dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        assignments = d2.argmin(axis=1)  # argmin takes the lowest index on ties
        history.append(float(d2[np.arange(len(points)), assignments].sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                # dead centroid: restart it at the point farthest from it
                far = _sq_dists(points, centroids[j : j + 1]).ravel().argmax()
                new_centroids[j] = points[far]
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _sq_dists(points, centroids)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), assignments].sum())
    history.append(inertia)
    return centroids, assignments, inertia, history


def kmeans_cluster(points, k, max_iters=100, tol=1e-4, seed=0, n_init=10):
    """Cluster rows of `points` into k groups; best of n_init seeded runs."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError(f"points must be [N, D], got shape {points.shape}")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if len(points) < k:
        raise ConfigurationError(f"cannot form {k} clusters from {len(points)} points")
    if n_init < 1:
        raise ConfigurationError(f"n_init must be >= 1, got {n_init}")
    best = None
    for run in range(n_init):
        rng = np.random.default_rng(seed + run)
        centroids, assignments, inertia, history = _lloyd(points, k, max_iters, tol, rng)
        if best is None or inertia < best.inertia:
            best = ClusterModel(centroids, assignments, inertia, history)
    return best


def select_target_anchor(clusters, surrogate, server, target_samples, batch_size=256):
    """Choose the centroid closest (summed L2) to target-class probe outputs."""
    if len(target_samples) == 0:
        raise ConfigurationError("no auxiliary samples of the target class")
    probes = []
    for lo in range(0, len(target_samples), batch_size):
        x = torch.from_numpy(target_samples.pixels[lo : lo + batch_size])
        out = server.infer(surrogate.infer(x))
        probes.append(out.numpy().reshape(len(x), -1).astype(np.float64))
    probes = np.concatenate(probes)
    if probes.shape[1] != clusters.centroids.shape[1]:
        raise DimensionError(
            f"probe width {probes.shape[1]} != centroid width {clusters.centroids.shape[1]}"
        )
    diffs = clusters.centroids[:, None, :] - probes[None, :, :]
    distances = np.sqrt((diffs**2).sum(axis=2)).sum(axis=1)
    cluster_id = int(distances.argmin())  # ties -> lowest cluster id
    return AnchorEmbedding(
        vector=clusters.centroids[cluster_id].copy(),
        cluster_id=cluster_id,
        distances=distances,
    )
