"""Grouping clients before a round: budget choice, k-means, head selection.

Clients are clustered on standardized shard descriptors (example count and
index-range midpoint). Each cluster elects the member closest to its
centroid as head; heads are the only clients that talk to the server during
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClientShard


def choose_budget(rng: np.random.Generator, lo: int = 2, hi: int = 20) -> int:
    """Draw the cluster budget uniformly from [lo, hi]."""
    if lo < 2:
        raise ValueError("cluster budget must be at least 2")
    if lo > hi:
        raise ValueError(f"empty budget range [{lo}, {hi}]")
    return int(rng.integers(lo, hi + 1))


@dataclass
class ClusterAssignment:
    """Result of clustering n points into k groups."""

    k: int
    labels: np.ndarray
    centers: np.ndarray
    heads: list[int] = field(default_factory=list)
    sse_per_iter: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.k:
            raise ValueError("labels must lie in [0, k)")
        if len(self.centers) != self.k:
            raise ValueError("need one center per cluster")
        for cluster_id, head in enumerate(self.heads):
            if self.labels[head] != cluster_id:
                raise ValueError(f"head {head} does not belong to cluster {cluster_id}")

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _seed_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    for i in range(1, k):
        d2 = _squared_distances(points, centers[:i]).min(axis=1)
        total = d2.sum()
        probs = d2 / total
        centers[i] = points[rng.choice(n, p=probs)]
    return centers


def _lloyd(
    points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    centers = _seed_plus_plus(points, k, rng)
    labels = np.full(len(points), -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        new_labels = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(len(points)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for cluster_id in range(k):
            mask = labels == cluster_id
            if mask.any():
                centers[cluster_id] = points[mask].mean(axis=0)
            else:
                # revive an empty cluster with the point farthest from its center
                dist_own = d2[np.arange(len(points)), labels]
                centers[cluster_id] = points[dist_own.argmax()]
    return labels, centers, trace


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    n_init: int = 4,
) -> ClusterAssignment:
    """Cluster points with k-means++ seeding and Lloyd iterations.

    Runs n_init seeded restarts and keeps the lowest-SSE result. The points
    are canonicalized (lexicographically ordered) before seeding, so any
    permutation of the input rows yields the identical partition.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("points must be a non-empty 2-D array")
    if k < 2:
        raise ValueError("k must be at least 2")
    n_distinct = len(np.unique(points, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct points")
    order = np.lexsort(points.T[::-1])
    canonical = points[order]
    seeds = np.random.SeedSequence(seed).spawn(n_init)
    best: tuple[np.ndarray, np.ndarray, list[float]] | None = None
    for child in seeds:
        labels, centers, trace = _lloyd(canonical, k, np.random.default_rng(child), max_iter)
        if best is None or trace[-1] < best[2][-1]:
            best = (labels, centers, trace)
    labels_sorted, centers, trace = best
    labels = np.empty(len(points), dtype=np.int64)
    labels[order] = labels_sorted
    heads = select_heads(points, labels, centers)
    return ClusterAssignment(k=k, labels=labels, centers=centers, heads=heads, sse_per_iter=trace)


def select_heads(points: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> list[int]:
    """Pick each cluster's head: the member closest to the centroid.

    Distance ties resolve to the lowest point index.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    heads = []
    for cluster_id in range(len(centers)):
        members = np.flatnonzero(labels == cluster_id)
        if len(members) == 0:
            raise ValueError(f"cluster {cluster_id} has no members")
        d2 = ((points[members] - centers[cluster_id]) ** 2).sum(axis=1)
        heads.append(int(members[d2.argmin()]))
    return heads


def shard_descriptor(shard: ClientShard) -> np.ndarray:
    """Raw clustering coordinates for one shard: (count, index-range midpoint)."""
    return np.array([shard.count, (shard.min_index + shard.max_index) / 2.0])


def client_features(shards: list[ClientShard]) -> np.ndarray:
    """Standardized descriptor matrix for a cohort of shards.

    Each coordinate is centered and scaled to unit variance across the
    cohort; constant coordinates become zeros.
    """
    if not shards:
        raise ValueError("no shards")
    raw = np.stack([shard_descriptor(s) for s in shards])
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    safe = np.where(std > 1e-12, std, 1.0)
    return (raw - mean) / safe
