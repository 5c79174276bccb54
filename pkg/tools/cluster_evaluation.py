#!/usr/bin/env python3
"""
Clustering Evaluation
Inference protocol for generalized category discovery:

    1. embed every record (stored f_st, or the normalized projection of f_stf)
    2. k-means over all records
    3. Hungarian matching of clusters to classes on the unlabeled records
    4. All / Old / New accuracy under that single mapping

Also estimates the class count by scoring candidate k on the labeled records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from tools.consistency_voting import kmeans
from tools.feature_dataset import Dataset
from tools.gcd_model import ModelParams, embed_records
from tools.residual_fusion import FusionConfig
from tools.seeding import derive_seed

SPACES = ("raw_st", "proj_stf")


@dataclass(frozen=True)
class EvalConfig:
    space: str = "proj_stf"
    k: Optional[int] = None  # None -> num_classes_total
    k_grid: Optional[Tuple[int, ...]] = None  # None -> |C_L| .. 2 * |C_N|
    seed: int = 0

    def validate(self) -> None:
        if self.space not in SPACES:
            raise ValueError(f"eval.space must be one of {SPACES}, got {self.space!r}")
        if self.k is not None and self.k < 2:
            raise ValueError(f"eval.k must be >= 2, got {self.k}")
        if self.k_grid is not None and (not self.k_grid or min(self.k_grid) < 1):
            raise ValueError(f"eval.k_grid must be a non-empty list of positive integers, got {self.k_grid}")
        if self.seed < 0:
            raise ValueError(f"eval.seed must be non-negative, got {self.seed}")

    def resolve_k(self, n_total: int) -> int:
        return n_total if self.k is None else self.k

    def resolve_grid(self, ds: Dataset) -> Tuple[int, ...]:
        if self.k_grid is not None:
            return tuple(self.k_grid)
        return tuple(range(max(2, len(ds.known_classes)), 2 * ds.num_classes_total + 1))


@dataclass(frozen=True)
class Assignment:
    rows: np.ndarray
    cols: np.ndarray
    total_cost: float

    def as_dict(self) -> Dict[int, int]:
        return {int(r): int(c) for r, c in zip(self.rows, self.cols)}


def _solve(matrix: np.ndarray) -> Tuple[float, np.ndarray]:
    if matrix.size == 0:
        return 0.0, np.empty(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(matrix)
    return float(matrix[rows, cols].sum()), cols


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective row -> column map of size min(n, m).

    The matrix is zero-padded to square. Among optimal assignments the one
    with the lexicographically smallest column vector wins: rows are fixed in
    order, each to the smallest column that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or min(cost.shape) < 1:
        raise ValueError(f"Cost matrix must be n x m with n, m >= 1, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("Cost matrix contains non-finite entries")

    n, m = cost.shape
    size = max(n, m)
    square = np.zeros((size, size), dtype=np.float64)
    square[:n, :m] = cost
    best, assign = _solve(square)
    assign = assign.copy()
    tol = 1e-9 * max(1.0, abs(best))

    free = list(range(size))
    prefix = 0.0
    for row in range(n):
        later = np.arange(row + 1, size)
        for col in free:
            if col >= assign[row]:
                break
            rest = [c for c in free if c != col]
            sub_cost, sub_cols = _solve(square[np.ix_(later, rest)])
            if prefix + square[row, col] + sub_cost <= best + tol:
                assign[row] = col
                assign[row + 1 :] = np.asarray(rest, dtype=np.int64)[sub_cols]
                break
        prefix += square[row, assign[row]]
        free.remove(int(assign[row]))

    rows = np.array([r for r in range(n) if assign[r] < m], dtype=np.int64)
    cols = assign[rows].astype(np.int64)
    return Assignment(rows=rows, cols=cols, total_cost=float(cost[rows, cols].sum()))


@dataclass(frozen=True)
class AccResult:
    all_acc: float
    old_acc: float
    new_acc: float
    mapping: Dict[int, int]
    old_hits: int = 0
    new_hits: int = 0


def acc_metrics(pred_clusters: Sequence[int], gt_labels: Sequence[int], known_classes: Iterable[int]) -> AccResult:
    """Hungarian-matched accuracy; one global mapping, then per-subgroup rates.

    An empty subgroup scores 0.0.
    """
    pred = np.asarray(pred_clusters, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"Prediction and label vectors differ in shape: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("Evaluation set is empty")

    clusters, pred_idx = np.unique(pred, return_inverse=True)
    classes, gt_idx = np.unique(gt, return_inverse=True)
    counts = np.zeros((clusters.size, classes.size), dtype=np.int64)
    np.add.at(counts, (pred_idx, gt_idx), 1)

    match = hungarian(-counts)
    lookup = np.full(clusters.size, -1, dtype=np.int64)
    lookup[match.rows] = classes[match.cols]
    hits = lookup[pred_idx] == gt

    old_mask = np.isin(gt, np.asarray(list(known_classes), dtype=np.int64))
    old_hits = int(hits[old_mask].sum())
    new_hits = int(hits[~old_mask].sum())
    return AccResult(
        all_acc=float(hits.mean()),
        old_acc=old_hits / int(old_mask.sum()) if old_mask.any() else 0.0,
        new_acc=new_hits / int((~old_mask).sum()) if (~old_mask).any() else 0.0,
        mapping={int(clusters[r]): int(classes[c]) for r, c in zip(match.rows, match.cols)},
        old_hits=old_hits,
        new_hits=new_hits,
    )


@dataclass(frozen=True)
class EvalReport:
    cluster_assignments: np.ndarray
    mapping: List[Tuple[int, int]]
    all_acc: float
    old_acc: float
    new_acc: float
    k_used: int
    space: str
    k_scores: Dict[int, float] = field(default_factory=dict)


def embed_for_space(
    ds: Dataset,
    params: Optional[ModelParams],
    space: str,
    fusion: FusionConfig = FusionConfig(),
    use_fusion: bool = True,
) -> np.ndarray:
    if space == "raw_st":
        return ds.f_st.astype(np.float64)
    if space == "proj_stf":
        if params is None:
            raise ValueError("The proj_stf space needs model parameters")
        return embed_records(params, ds, fusion, use_fusion)
    raise ValueError(f"Unknown evaluation space {space!r}; expected one of {SPACES}")


def evaluate(
    ds: Dataset,
    params: Optional[ModelParams],
    k: int,
    space: str = "proj_stf",
    seed: int = 0,
    fusion: FusionConfig = FusionConfig(),
    use_fusion: bool = True,
) -> EvalReport:
    """Cluster every record, score the unlabeled ones."""
    if k < 2:
        raise ValueError(f"Evaluation needs k >= 2, got {k}")
    unlabeled = ds.unlabeled_indices()
    if unlabeled.size == 0:
        raise ValueError("Dataset has no unlabeled records to evaluate")
    points = embed_for_space(ds, params, space, fusion, use_fusion)
    clusters = kmeans(points, k, seed=derive_seed(seed, "eval")).assignments
    acc = acc_metrics(clusters[unlabeled], ds.gt_labels[unlabeled], ds.known_classes)
    return EvalReport(
        cluster_assignments=clusters,
        mapping=sorted(acc.mapping.items()),
        all_acc=acc.all_acc,
        old_acc=acc.old_acc,
        new_acc=acc.new_acc,
        k_used=k,
        space=space,
    )


@dataclass(frozen=True)
class KEstimate:
    k: int
    scores: Dict[int, float]


def estimate_k(
    ds: Dataset,
    params: Optional[ModelParams],
    k_grid: Iterable[int],
    seed: int = 0,
    space: str = "proj_stf",
    fusion: FusionConfig = FusionConfig(),
    use_fusion: bool = True,
) -> KEstimate:
    """Pick the k whose clustering of all records best matches the labeled records.

    Ties go to the smallest k.
    """
    grid = sorted({int(k) for k in k_grid})
    if not grid:
        raise ValueError("k_grid is empty")
    if grid[0] < max(1, len(ds.known_classes)):
        raise ValueError(f"Every candidate k must be >= the known class count {len(ds.known_classes)}, got {grid[0]}")
    if grid[-1] > len(ds):
        raise ValueError(f"Candidate k={grid[-1]} exceeds the record count {len(ds)}")
    labeled = ds.labeled_indices()
    if labeled.size == 0:
        raise ValueError("Estimating k needs labeled records")

    points = embed_for_space(ds, params, space, fusion, use_fusion)
    scores: Dict[int, float] = {}
    best_k, best_score = grid[0], -1.0
    for k in grid:
        clusters = kmeans(points, k, seed=derive_seed(seed, "estimate-k", k)).assignments
        score = acc_metrics(clusters[labeled], ds.gt_labels[labeled], ds.known_classes).all_acc
        scores[k] = score
        if score > best_score:
            best_k, best_score = k, score
    return KEstimate(k=best_k, scores=scores)
