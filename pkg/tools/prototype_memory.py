#!/usr/bin/env python3
"""
Category-Level Memory Buffer
Keeps a fixed, randomly sampled subset of labeled records per known class and
derives two teachers from it once per epoch:

    feature prototypes   mean projected embedding of the members, L2-normalized
    logit prototypes     classifier output on the mean raw f_st of the members,
                         sharpened with a low temperature

Both teachers are detached copies; nothing trains through them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from tools.feature_dataset import Dataset
from tools.gcd_losses import sharpen
from tools.gcd_model import ModelParams, classify, project_features
from tools.seeding import make_rng

DEGENERATE_NORM = 1e-8


class DegeneratePrototypeWarning(RuntimeWarning):
    """A class mean collapsed to (near) zero norm before normalization."""


@dataclass(frozen=True)
class MemoryConfig:
    fraction: float = 0.2

    def validate(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"memory.fraction must be in (0, 1], got {self.fraction}")


def _detached(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class MemoryBank:
    classes: Tuple[int, ...]
    member_indices: Tuple[np.ndarray, ...]
    raw_protos: np.ndarray
    feat_protos: np.ndarray
    logit_protos: np.ndarray
    sharpened: np.ndarray
    epoch_tag: int

    def row_of(self, class_id: int) -> int:
        try:
            return self.classes.index(int(class_id))
        except ValueError:
            raise ValueError(f"Class {class_id} has no stored prototype") from None

    def rows_for(self, labels: np.ndarray) -> np.ndarray:
        """Prototype row per training label; -1 for unlabeled (-1) entries."""
        labels = np.asarray(labels)
        lookup = {c: i for i, c in enumerate(self.classes)}
        rows = np.full(labels.shape, -1, dtype=np.int64)
        for pos, label in enumerate(labels.tolist()):
            if label < 0:
                continue
            if label not in lookup:
                raise ValueError(f"Labeled class {label} has no stored prototype")
            rows[pos] = lookup[label]
        return rows


def sample_memory_subset(ds: Dataset, fraction: float, seed: int) -> Dict[int, np.ndarray]:
    """Per known class, a seeded sample of max(1, ceil(fraction * count)) labeled indices."""
    MemoryConfig(fraction).validate()
    labeled = ds.labeled_indices()
    if labeled.size == 0:
        raise ValueError("The memory buffer needs labeled records")
    members: Dict[int, np.ndarray] = {}
    for class_id in ds.known_classes:
        pool = labeled[ds.gt_labels[labeled] == class_id]
        if pool.size == 0:
            continue
        take = max(1, math.ceil(round(fraction * pool.size, 9)))
        chosen = make_rng(seed, "memory", class_id).choice(pool, size=take, replace=False)
        members[class_id] = np.sort(chosen)
    return members


def compute_feature_prototypes(
    member_indices: Dict[int, np.ndarray],
    embed: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """p_c = normalize(mean of embed(members of c)), classes in sorted order."""
    rows = []
    for class_id in sorted(member_indices):
        members = np.asarray(member_indices[class_id])
        if members.size == 0:
            raise ValueError(f"Class {class_id} has no memory members")
        embedded = np.atleast_2d(embed(members))
        mean = embedded.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < DEGENERATE_NORM:
            warnings.warn(
                f"Prototype of class {class_id} has norm {norm:.3g}; using its first member instead",
                DegeneratePrototypeWarning,
                stacklevel=2,
            )
            mean = embedded[0]
            norm = float(np.linalg.norm(mean))
        rows.append(mean / norm)
    return np.stack(rows)


def compute_logit_prototypes(
    protos: np.ndarray,
    classifier: Callable[[np.ndarray], np.ndarray],
    tau_tl: float,
) -> Tuple[np.ndarray, np.ndarray]:
    protos = np.atleast_2d(protos)
    logits = np.atleast_2d(classifier(protos))
    if logits.shape[0] != protos.shape[0]:
        raise ValueError(f"Classifier returned {logits.shape[0]} rows for {protos.shape[0]} prototypes")
    return _detached(logits), _detached(sharpen(logits, tau_tl))


def _raw_means(ds: Dataset, member_indices: Dict[int, np.ndarray], dtype) -> np.ndarray:
    return np.stack([ds.f_st[member_indices[c]].astype(dtype).mean(axis=0) for c in sorted(member_indices)])


def refresh_bank(
    bank: MemoryBank,
    params: ModelParams,
    ds: Dataset,
    epoch: int,
    tau_tl: float,
) -> MemoryBank:
    """Recompute both teachers from the current model; membership stays fixed."""
    members = dict(zip(bank.classes, bank.member_indices))
    feat = compute_feature_prototypes(members, lambda idx: project_features(params, ds.f_st[idx]))
    logits, sharpened = compute_logit_prototypes(bank.raw_protos, lambda x: classify(params, x), tau_tl)
    return replace(
        bank,
        feat_protos=_detached(feat),
        logit_protos=logits,
        sharpened=sharpened,
        epoch_tag=int(epoch),
    )


def build_bank(
    ds: Dataset,
    params: ModelParams,
    cfg: MemoryConfig,
    seed: int,
    tau_tl: float,
    epoch: int = 0,
    member_indices: Optional[Dict[int, np.ndarray]] = None,
) -> MemoryBank:
    members = member_indices if member_indices is not None else sample_memory_subset(ds, cfg.fraction, seed)
    classes = tuple(sorted(members))
    empty = np.zeros((len(classes), 0), dtype=params.dtype)
    bank = MemoryBank(
        classes=classes,
        member_indices=tuple(_detached(members[c]) for c in classes),
        raw_protos=_detached(_raw_means(ds, members, params.dtype)),
        feat_protos=empty,
        logit_protos=empty,
        sharpened=empty,
        epoch_tag=epoch,
    )
    return refresh_bank(bank, params, ds, epoch, tau_tl)
