"""Artifact storage: model checkpoints, metrics CSVs, JSON reports and config sidecars."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np

from tools.gcd_model import ModelParams
from tools.train_gcd_model import METRICS_COLUMNS

CHECKPOINT_MAGIC = b"VGCK"
CHECKPOINT_VERSION = 1

_PREAMBLE = struct.Struct("<4sH")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")

PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: Dict[str, np.ndarray]) -> bytes:
    """Named binary32 tensors, little-endian, in insertion order."""
    out = io.BytesIO()
    out.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        if array.ndim > 255:
            raise CheckpointError(f"Tensor {name} has rank {array.ndim}; at most 255 is supported")
        out.write(_NAME_LEN.pack(len(encoded)))
        out.write(encoded)
        out.write(_RANK.pack(array.ndim))
        out.write(np.asarray(array.shape, dtype="<u4").tobytes())
        out.write(array.tobytes())
    return out.getvalue()


def _take(payload: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(payload):
        raise CheckpointError(f"Checkpoint ended unexpectedly while reading {what}")
    return payload[offset : offset + size]


def decode_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    if len(payload) < _PREAMBLE.size:
        raise CheckpointError("Checkpoint ended unexpectedly while reading the header")
    magic, version = _PREAMBLE.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    tensors: Dict[str, np.ndarray] = {}
    offset = _PREAMBLE.size
    while offset < len(payload):
        (name_len,) = _NAME_LEN.unpack(_take(payload, offset, _NAME_LEN.size, "a tensor name length"))
        offset += _NAME_LEN.size
        try:
            name = _take(payload, offset, name_len, "a tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"Tensor name is not valid UTF-8: {exc}") from None
        offset += name_len
        if name in tensors:
            raise CheckpointError(f"Duplicate tensor {name}")
        (rank,) = _RANK.unpack(_take(payload, offset, _RANK.size, f"the rank of {name}"))
        offset += _RANK.size
        shape = tuple(int(d) for d in np.frombuffer(_take(payload, offset, 4 * rank, f"the shape of {name}"), dtype="<u4"))
        offset += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        data = _take(payload, offset, 4 * count, f"the data of {name}")
        offset += 4 * count
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return tensors


def save_checkpoint(params: ModelParams, path: PathLike) -> Path:
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(encode_checkpoint(params.tensors))
    return output


def load_checkpoint(path: PathLike, dtype=np.float64) -> ModelParams:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Checkpoint not found: {source}")
    tensors = decode_checkpoint(source.read_bytes())
    try:
        return ModelParams.from_tensors(tensors, dtype=dtype)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"Checkpoint does not describe a valid model: {exc}") from None


def format_float(value: Optional[float]) -> str:
    return "" if value is None else "%.10g" % value


def metrics_csv_text(rows: Iterable[Dict[str, object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow(
            [row["epoch"]] + [format_float(row.get(column)) for column in METRICS_COLUMNS[1:]]  # type: ignore[arg-type]
        )
    return buffer.getvalue()


def matrix_csv_text(matrix: np.ndarray, header: Sequence[object], fmt=str) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in np.asarray(matrix):
        writer.writerow([fmt(v) for v in row])
    return buffer.getvalue()


@dataclass
class StoredArtifact:
    path: str
    size_bytes: int


class ArtifactStorage:
    """Writes run artifacts below one root directory."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: PathLike) -> Path:
        candidate = Path(name)
        return candidate if candidate.is_absolute() else self.root / candidate

    def _stored(self, target: Path) -> StoredArtifact:
        try:
            shown = str(target.relative_to(self.root))
        except ValueError:
            shown = str(target)
        return StoredArtifact(path=shown, size_bytes=target.stat().st_size)

    def write_text(self, name: PathLike, text: str) -> StoredArtifact:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        return self._stored(target)

    def write_json(self, name: PathLike, payload) -> StoredArtifact:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_metrics(self, name: PathLike, rows: Iterable[Dict[str, object]]) -> StoredArtifact:
        return self.write_text(name, metrics_csv_text(rows))


def sidecar_path(path: PathLike) -> Path:
    """Effective-config sidecar next to an artifact: ``<file>.config``."""
    target = Path(path)
    return target.with_name(target.name + ".config")
