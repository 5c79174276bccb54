#!/usr/bin/env python3
"""
Feature Dataset
Dataset model for multi-perspective feature triples, the VGCD binary feature
file, the confounded-class synthetic generator and batch sampling.

Each record carries a spatial (f_s), temporal (f_t) and spatiotemporal (f_st)
vector of the same length C. Classes in the synthetic generator share spatial
prototypes in groups, so only the temporal view separates them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from tools.seeding import make_rng

MAGIC = b"VGCD"
FORMAT_VERSION = 1
SPLITS = ("even_odd", "contiguous")

_HEADER = struct.Struct("<4sHIQII")
_KNOWN_ID = struct.Struct("<I")

PathLike = Union[str, Path]


class FeatureFileError(ValueError):
    """Raised when a feature file cannot be decoded."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class DimensionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    def __init__(self, message: str, record_index: Optional[int] = None):
        super().__init__(message)
        self.record_index = record_index


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    id: int
    f_s: np.ndarray
    f_t: np.ndarray
    f_st: np.ndarray
    gt_label: int
    is_labeled: bool


def known_class_ids(num_classes_total: int, split: str = "even_odd") -> Tuple[int, ...]:
    """Known classes: even ids by default, the first half for the contiguous split."""
    if split == "even_odd":
        return tuple(range(0, num_classes_total, 2))
    if split == "contiguous":
        return tuple(range(max(1, num_classes_total // 2)))
    raise ValueError(f"Unknown class split '{split}'. Supported: {', '.join(SPLITS)}")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of feature records.

    Ground-truth labels of unlabeled records are kept for evaluation; training
    code reads labels through ``training_labels()`` which masks them with -1.
    """

    ids: np.ndarray
    f_s: np.ndarray
    f_t: np.ndarray
    f_st: np.ndarray
    gt_labels: np.ndarray
    is_labeled: np.ndarray
    num_classes_total: int
    known_classes: Tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(np.asarray(self.ids, dtype=np.uint64)))
        for name in ("f_s", "f_t", "f_st"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.float32)))
        object.__setattr__(self, "gt_labels", _frozen(np.asarray(self.gt_labels, dtype=np.int32)))
        object.__setattr__(self, "is_labeled", _frozen(np.asarray(self.is_labeled, dtype=bool)))
        object.__setattr__(self, "known_classes", tuple(sorted(int(c) for c in self.known_classes)))
        self._validate()

    def _validate(self) -> None:
        n = self.ids.shape[0]
        if self.f_s.ndim != 2 or self.f_s.shape[1] < 1:
            raise ValueError(f"Feature matrices must be N x C with C >= 1, got shape {self.f_s.shape}")
        if self.f_s.shape != self.f_t.shape or self.f_s.shape != self.f_st.shape:
            raise ValueError(
                f"Feature views disagree in shape: f_s {self.f_s.shape}, f_t {self.f_t.shape}, f_st {self.f_st.shape}"
            )
        if self.f_s.shape[0] != n or self.gt_labels.shape != (n,) or self.is_labeled.shape != (n,):
            raise ValueError("Record columns have inconsistent lengths")
        if self.num_classes_total < 2:
            raise ValueError(f"num_classes_total must be >= 2, got {self.num_classes_total}")
        for name in ("f_s", "f_t", "f_st"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"Non-finite entries in {name}")
        if len(np.unique(self.ids)) != n:
            raise ValueError("Record ids must be unique")
        known = np.asarray(self.known_classes, dtype=np.int64)
        if known.size and (known.min() < 0 or known.max() >= self.num_classes_total):
            raise ValueError(f"Known classes must lie in 0..{self.num_classes_total - 1}")
        if len(set(self.known_classes)) != len(self.known_classes):
            raise ValueError("Known classes contain duplicates")
        labeled_labels = self.gt_labels[self.is_labeled]
        if np.any(labeled_labels < 0):
            raise ValueError("Labeled records must carry a ground-truth label")
        if labeled_labels.size and not np.all(np.isin(labeled_labels, known)):
            bad = sorted(set(labeled_labels.tolist()) - set(self.known_classes))
            raise ValueError(f"Labeled records belong to unknown classes: {bad}")
        if np.any(self.gt_labels >= self.num_classes_total):
            raise ValueError(f"Ground-truth labels must be < {self.num_classes_total}")

    @classmethod
    def from_records(
        cls,
        records: Sequence[FeatureRecord],
        num_classes_total: int,
        known_classes: Iterable[int],
        seed: int = 0,
    ) -> "Dataset":
        if not records:
            raise ValueError("A dataset needs at least one record")
        return cls(
            ids=np.array([r.id for r in records], dtype=np.uint64),
            f_s=np.stack([r.f_s for r in records]),
            f_t=np.stack([r.f_t for r in records]),
            f_st=np.stack([r.f_st for r in records]),
            gt_labels=np.array([r.gt_label for r in records], dtype=np.int32),
            is_labeled=np.array([r.is_labeled for r in records], dtype=bool),
            num_classes_total=num_classes_total,
            known_classes=tuple(known_classes),
            seed=seed,
        )

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __eq__(self, other: object) -> bool:
        # seed is provenance only; the file format does not carry it
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes_total == other.num_classes_total
            and self.known_classes == other.known_classes
            and all(
                getattr(self, name).shape == getattr(other, name).shape
                and getattr(self, name).tobytes() == getattr(other, name).tobytes()
                for name in ("ids", "f_s", "f_t", "f_st", "gt_labels", "is_labeled")
            )
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def dim(self) -> int:
        return int(self.f_s.shape[1])

    @property
    def unknown_classes(self) -> Tuple[int, ...]:
        known = set(self.known_classes)
        return tuple(c for c in range(self.num_classes_total) if c not in known)

    @property
    def records(self) -> Tuple[FeatureRecord, ...]:
        return tuple(self.record(i) for i in range(len(self)))

    def record(self, index: int) -> FeatureRecord:
        return FeatureRecord(
            id=int(self.ids[index]),
            f_s=self.f_s[index],
            f_t=self.f_t[index],
            f_st=self.f_st[index],
            gt_label=int(self.gt_labels[index]),
            is_labeled=bool(self.is_labeled[index]),
        )

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_labeled)

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_labeled)

    def training_labels(self) -> np.ndarray:
        """Labels visible to training: gt for D_L, -1 for D_U."""
        return np.where(self.is_labeled, self.gt_labels, -1).astype(np.int32)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            ids=self.ids[idx],
            f_s=self.f_s[idx],
            f_t=self.f_t[idx],
            f_st=self.f_st[idx],
            gt_labels=self.gt_labels[idx],
            is_labeled=self.is_labeled[idx],
            num_classes_total=self.num_classes_total,
            known_classes=self.known_classes,
            seed=self.seed,
        )


@dataclass(frozen=True)
class SyntheticConfig:
    n_spatial_protos: int = 4
    temporal_per_spatial: int = 2
    dim: int = 16
    noise_sigma: float = 0.1
    samples_per_class: int = 200
    labeled_fraction: float = 0.5
    seed: int = 0
    split: str = "even_odd"

    @property
    def num_classes(self) -> int:
        return self.n_spatial_protos * self.temporal_per_spatial

    def validate(self) -> None:
        if self.n_spatial_protos < 1 or self.temporal_per_spatial < 1:
            raise ValueError("Synthetic data needs at least one spatial and one temporal prototype (zero classes)")
        if self.num_classes < 2:
            raise ValueError(f"Synthetic data needs >= 2 classes, got {self.num_classes}")
        if self.dim < 1:
            raise ValueError(f"data.dim must be >= 1, got {self.dim}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"data.noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.samples_per_class < 1:
            raise ValueError(f"data.samples_per_class must be >= 1, got {self.samples_per_class}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"data.labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.seed < 0:
            raise ValueError(f"data.seed must be non-negative, got {self.seed}")
        if self.split not in SPLITS:
            raise ValueError(f"data.split must be one of {', '.join(SPLITS)}, got '{self.split}'")


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def labeled_count(fraction: float, count: int) -> int:
    # round first so 0.1 * 30 does not ceil to 4
    return int(math.ceil(round(fraction * count, 9)))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Build the confounded-class dataset described by ``cfg``.

    Class c uses spatial prototype c // temporal_per_spatial and its own
    temporal prototype; f_st is the prototype midpoint. Arithmetic runs in
    binary32 so the zero-noise midpoint identity holds exactly.
    """
    cfg.validate()
    classes = cfg.num_classes
    rng = make_rng(cfg.seed, "synthetic")

    spatial = _unit_rows(rng.standard_normal((cfg.n_spatial_protos, cfg.dim))).astype(np.float32)
    temporal = _unit_rows(rng.standard_normal((classes, cfg.dim))).astype(np.float32)
    known = known_class_ids(classes, cfg.split)
    known_set = set(known)
    sigma = np.float32(cfg.noise_sigma)
    n_labeled = labeled_count(cfg.labeled_fraction, cfg.samples_per_class)

    f_s, f_t, f_st, labels, flags = [], [], [], [], []
    for class_id in range(classes):
        s = spatial[class_id // cfg.temporal_per_spatial]
        t = temporal[class_id]
        noise = rng.standard_normal((3, cfg.samples_per_class, cfg.dim)).astype(np.float32) * sigma
        f_s.append(s + noise[0])
        f_t.append(t + noise[1])
        f_st.append((s + t) / np.float32(2.0) + noise[2])
        labels.append(np.full(cfg.samples_per_class, class_id, dtype=np.int32))
        mask = np.zeros(cfg.samples_per_class, dtype=bool)
        chosen = rng.permutation(cfg.samples_per_class)[:n_labeled]
        if class_id in known_set:
            mask[chosen] = True
        flags.append(mask)

    total = classes * cfg.samples_per_class
    return Dataset(
        ids=np.arange(total, dtype=np.uint64),
        f_s=np.concatenate(f_s),
        f_t=np.concatenate(f_t),
        f_st=np.concatenate(f_st),
        gt_labels=np.concatenate(labels),
        is_labeled=np.concatenate(flags),
        num_classes_total=classes,
        known_classes=known,
        seed=cfg.seed,
    )


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [
            ("id", "<u8"),
            ("gt_label", "<i4"),
            ("is_labeled", "u1"),
            ("padding", "u1", (3,)),
            ("features", "<f4", (3, dim)),
        ]
    )


def encode_dataset(ds: Dataset) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, ds.dim, len(ds), ds.num_classes_total, len(ds.known_classes))
    known = b"".join(_KNOWN_ID.pack(c) for c in ds.known_classes)
    rows = np.zeros(len(ds), dtype=_record_dtype(ds.dim))
    rows["id"] = ds.ids
    rows["gt_label"] = ds.gt_labels
    rows["is_labeled"] = ds.is_labeled.astype(np.uint8)
    rows["features"] = np.stack([ds.f_s, ds.f_t, ds.f_st], axis=1)
    return header + known + rows.tobytes()


def decode_dataset(payload: bytes, expected_dim: Optional[int] = None) -> Dataset:
    if len(payload) < 4 or payload[:4] != MAGIC:
        raise BadMagicError(f"Bad magic {payload[:4]!r}, expected {MAGIC!r}")
    if len(payload) < _HEADER.size:
        raise TruncatedFileError("File ends inside the header")
    _, version, dim, count, num_classes, known_count = _HEADER.unpack_from(payload, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"Unsupported feature file version {version}, expected {FORMAT_VERSION}")
    if dim < 1:
        raise DimensionMismatchError(f"Feature dimension must be >= 1, file declares {dim}")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"Feature dimension {dim} does not match expected {expected_dim}")

    offset = _HEADER.size
    known_end = offset + known_count * _KNOWN_ID.size
    if len(payload) < known_end:
        raise TruncatedFileError("File ends inside the known-class list")
    known = tuple(int(c) for c in np.frombuffer(payload, dtype="<u4", count=known_count, offset=offset))

    dtype = _record_dtype(dim)
    available = len(payload) - known_end
    expected = count * dtype.itemsize
    if available < expected:
        index = available // dtype.itemsize
        raise TruncatedFileError(f"File truncated in record {index} of {count}", record_index=index)
    if available > expected:
        raise FeatureFileError(f"{available - expected} unexpected trailing bytes after {count} records")

    rows = np.frombuffer(payload, dtype=dtype, count=count, offset=known_end)
    try:
        return Dataset(
            ids=rows["id"].copy(),
            f_s=rows["features"][:, 0, :].copy(),
            f_t=rows["features"][:, 1, :].copy(),
            f_st=rows["features"][:, 2, :].copy(),
            gt_labels=rows["gt_label"].copy(),
            is_labeled=rows["is_labeled"] != 0,
            num_classes_total=num_classes,
            known_classes=known,
        )
    except ValueError as exc:
        raise FeatureFileError(f"Invalid dataset contents: {exc}") from exc


def save_dataset(ds: Dataset, path: PathLike) -> Path:
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(encode_dataset(ds))
    return output


def load_dataset(path: PathLike, expected_dim: Optional[int] = None) -> Dataset:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Feature file not found: {source}")
    return decode_dataset(source.read_bytes(), expected_dim=expected_dim)


def make_batches(ds: Dataset, batch_size: int, seed: int, labeled_only: bool = False) -> List[np.ndarray]:
    """Seeded permutation of eligible indices cut into consecutive batches.

    A trailing batch smaller than 2 is dropped.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    eligible = ds.labeled_indices() if labeled_only else np.arange(len(ds))
    if eligible.size == 0:
        raise ValueError("No eligible records to batch" + (" (no labeled records)" if labeled_only else ""))
    order = eligible[make_rng(seed, "batches").permutation(eligible.size)]
    batches = [order[start : start + batch_size] for start in range(0, order.size, batch_size)]
    return [batch for batch in batches if batch.size >= 2]
