#!/usr/bin/env python3
"""
Multi-View Consistency Voting
Clusters the spatial, temporal and fused views at several granularities,
counts how often each pair of records lands in the same cluster and turns
the counts into consistency scores mixed with label agreement.

Level layout for K levels over |C_N| classes:
    k = 0, 1, 2   horizontal: f_s, f_t, f_stf with |C_N| clusters
    k >= 3        vertical:   f_stf with |C_N| // 2**(k-2) clusters
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from tools.feature_dataset import Dataset
from tools.seeding import derive_seed, make_rng

_DISTANCE_CHUNK = 4096


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    inertia_history: List[float] = field(default_factory=list)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # explicit differences keep exact zeros for coincident points
    out = np.empty((points.shape[0], centroids.shape[0]), dtype=np.float64)
    for start in range(0, points.shape[0], _DISTANCE_CHUNK):
        chunk = points[start : start + _DISTANCE_CHUNK]
        diff = chunk[:, None, :] - centroids[None, :, :]
        out[start : start + _DISTANCE_CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    closest = _squared_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            next_idx = rng.choice(n, p=closest / total)
        else:
            next_idx = rng.integers(0, n)
        centroids[i] = points[next_idx]
        closest = np.minimum(closest, _squared_distances(points, centroids[i : i + 1])[:, 0])
    return centroids


def _assign(points: np.ndarray, centroids: np.ndarray):
    distances = _squared_distances(points, centroids)
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(points.shape[0]), labels]


def _repair_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray, d2: np.ndarray) -> None:
    """Move the farthest point of a multi-member cluster into each empty cluster."""
    k = centroids.shape[0]
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        donors = counts[labels] >= 2
        candidates = np.where(donors, d2, -np.inf)
        point = int(np.argmax(candidates))
        counts[labels[point]] -= 1
        labels[point] = empty
        counts[empty] = 1
        centroids[empty] = points[point]
        d2[point] = 0.0


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    Stops when the largest centroid displacement drops below ``tol`` or after
    ``max_iter`` updates. Inertia is checked to be non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be an N x d matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"Cannot form {k} clusters from {n} points")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite entries")

    rng = make_rng(seed, "kmeans++")
    centroids = kmeans_plusplus_init(points, k, rng)
    labels, d2 = _assign(points, centroids)
    _repair_empty(points, centroids, labels, d2)
    history = [float(d2.sum())]

    iterations = 0
    for iterations in range(1, max_iter + 1):
        updated = np.empty_like(centroids)
        for j in range(k):
            updated[j] = points[labels == j].mean(axis=0)
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated

        labels, d2 = _assign(points, centroids)
        _repair_empty(points, centroids, labels, d2)
        inertia = float(d2.sum())
        if inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise RuntimeError(f"k-means inertia increased from {history[-1]} to {inertia} at iteration {iterations}")
        history.append(inertia)
        if shift < tol:
            break

    return KMeansResult(
        assignments=labels.astype(np.int64),
        centroids=centroids,
        inertia=history[-1],
        iterations=iterations,
        inertia_history=history,
    )


@dataclass(frozen=True)
class VoteConfig:
    levels: int = 5
    eta: float = 0.99
    literal_labels: bool = False
    k_unknown: bool = False
    max_iter: int = 100
    tol: float = 1e-4

    def validate(self, n_total: Optional[int] = None) -> None:
        if self.levels < 3:
            raise ValueError(f"vote.levels must be >= 3, got {self.levels}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"vote.eta must be in [0, 1], got {self.eta}")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("k-means needs max_iter >= 1 and tol > 0")
        if n_total is not None:
            level_cluster_counts(n_total, self.levels)


@dataclass(frozen=True)
class VoteTable:
    levels: List[np.ndarray]
    K: int
    w: np.ndarray
    c: np.ndarray
    eta: float

    def submatrix(self, indices: Sequence[int]) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        return self.c[np.ix_(idx, idx)]


def level_cluster_counts(n_total: int, levels: int) -> List[int]:
    counts = [n_total] * 3 + [n_total // 2 ** (k - 2) for k in range(3, levels)]
    for level, count in enumerate(counts):
        if count < 2:
            raise ValueError(f"Vote level {level} would have {count} cluster(s); every level needs >= 2")
    return counts


def build_vote_levels(
    f_s: np.ndarray,
    f_t: np.ndarray,
    f_stf: np.ndarray,
    n_total: int,
    K: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> List[np.ndarray]:
    if K < 3:
        raise ValueError(f"At least 3 vote levels are required, got {K}")
    counts = level_cluster_counts(n_total, K)
    views = [f_s, f_t, f_stf] + [f_stf] * (K - 3)
    return [
        kmeans(view, count, seed=derive_seed(seed, "vote-level", level), max_iter=max_iter, tol=tol).assignments
        for level, (view, count) in enumerate(zip(views, counts))
    ]


def vote_counts(levels: Sequence[np.ndarray]) -> np.ndarray:
    """w_ij = number of levels where i and j share a cluster."""
    if not levels:
        raise ValueError("vote_counts needs at least one level")
    lengths = {len(level) for level in levels}
    if len(lengths) != 1:
        raise ValueError(f"Vote levels have different lengths: {sorted(lengths)}")
    n = lengths.pop()
    w = np.zeros((n, n), dtype=np.int32)
    for level in levels:
        level = np.asarray(level)
        w += level[:, None] == level[None, :]
    return w


def consistency_scores(
    w: np.ndarray,
    is_labeled: np.ndarray,
    gt_labels: np.ndarray,
    eta: float,
    literal_labels: bool = False,
) -> np.ndarray:
    """c_ij = (1 - eta) * y_ij + eta * w_ij / sum_{k != i} w_ik.

    y_ij needs both records labeled with the same class; ``literal_labels``
    drops the same-class requirement. The diagonal is zero.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    if n < 2:
        raise ValueError(f"Consistency scores need at least 2 records, got {n}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")

    off_diagonal = w.copy()
    np.fill_diagonal(off_diagonal, 0.0)
    row_mass = off_diagonal.sum(axis=1, keepdims=True)
    normalized = np.divide(off_diagonal, row_mass, out=np.zeros_like(off_diagonal), where=row_mass > 0)

    labeled = np.asarray(is_labeled, dtype=bool)
    both = labeled[:, None] & labeled[None, :]
    if literal_labels:
        y = both
    else:
        labels = np.asarray(gt_labels)
        y = both & (labels[:, None] == labels[None, :])
    y = y.astype(np.float64)
    np.fill_diagonal(y, 0.0)

    return (1.0 - eta) * y + eta * normalized


def refresh_votes(
    ds: Dataset,
    fused_embeddings: np.ndarray,
    cfg: VoteConfig,
    seed: int,
    n_total: Optional[int] = None,
) -> VoteTable:
    """Recompute every vote level and the full consistency matrix.

    Levels 0-1 cluster the stored f_s / f_t; the fused levels cluster the
    model's current embedding of f_stf.
    """
    n_total = ds.num_classes_total if n_total is None else n_total
    if fused_embeddings.shape[0] != len(ds):
        raise ValueError(f"Expected {len(ds)} fused embeddings, got {fused_embeddings.shape[0]}")
    levels = build_vote_levels(
        ds.f_s, ds.f_t, fused_embeddings, n_total, cfg.levels, seed, max_iter=cfg.max_iter, tol=cfg.tol
    )
    w = vote_counts(levels)
    c = consistency_scores(w, ds.is_labeled, ds.training_labels(), cfg.eta, literal_labels=cfg.literal_labels)
    return VoteTable(levels=levels, K=cfg.levels, w=w, c=c, eta=cfg.eta)
