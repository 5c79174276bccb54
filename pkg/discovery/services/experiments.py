"""Hyperparameter sweeps and module ablations over one feature file."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

from tools.cluster_evaluation import evaluate
from tools.feature_dataset import Dataset, load_dataset
from tools.train_gcd_model import train

from discovery.config import ConfigError, RunConfig
from discovery.services.storage import ArtifactStorage, format_float, sidecar_path

Logger = Optional[Callable[[str], None]]
PathLike = Union[str, Path]

ABLATION_VARIANTS: Dict[str, Dict[str, str]] = {
    "baseline": {"ablation.fusion": "false", "ablation.hcl": "false", "ablation.feature_proto": "false", "ablation.logit_proto": "false"},
    "+memory": {"ablation.fusion": "false", "ablation.hcl": "false", "ablation.feature_proto": "true", "ablation.logit_proto": "true"},
    "+consistency": {"ablation.fusion": "true", "ablation.hcl": "true", "ablation.feature_proto": "false", "ablation.logit_proto": "false"},
    "full": {"ablation.fusion": "true", "ablation.hcl": "true", "ablation.feature_proto": "true", "ablation.logit_proto": "true"},
}

SWEEP_COLUMNS = ("key", "value", "all_acc", "old_acc", "new_acc")
ABLATION_COLUMNS = ("variant", "seed", "all_acc", "old_acc", "new_acc")


def _emit(logger: Logger, message: str) -> None:
    if logger:
        logger(message)


@dataclass(frozen=True)
class RunScore:
    label: str
    value: str
    all_acc: float
    old_acc: float
    new_acc: float


def train_and_score(config: RunConfig, ds: Dataset, logger: Logger = None) -> RunScore:
    """Train in memory and evaluate at the configured (or estimated) k."""
    result = train(ds, config.training_setup(), logger=logger)
    k = result.k_estimate if result.k_estimate is not None else config.eval.resolve_k(ds.num_classes_total)
    report = evaluate(ds, result.params, k, config.eval.space, config.eval.seed, config.fusion, config.ablation.fusion)
    return RunScore(label="", value="", all_acc=report.all_acc, old_acc=report.old_acc, new_acc=report.new_acc)


def _csv_text(columns: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buffer.getvalue()


def _write(config: RunConfig, out_csv: PathLike, text: str) -> Path:
    target = Path(out_csv)
    storage = ArtifactStorage(target.parent if str(target.parent) else ".")
    storage.write_text(target.name, text)
    config.save(sidecar_path(target))
    return target


def run_sweep(
    config: RunConfig,
    data_path: PathLike,
    key: str,
    values: Sequence[str],
    out_csv: PathLike,
    logger: Logger = None,
) -> List[RunScore]:
    """One training + evaluation per value of ``key``."""
    if not values:
        raise ConfigError("A sweep needs at least one value", key=key)
    config.value_of(key)
    ds = load_dataset(data_path)

    scores: List[RunScore] = []
    for raw in values:
        variant = config.with_overrides({key: str(raw)})
        _emit(logger, f"[sweep] {key} = {raw}")
        score = train_and_score(variant, ds)
        scores.append(RunScore(key, str(raw), score.all_acc, score.old_acc, score.new_acc))
        _emit(logger, f"[sweep] {key} = {raw}: all_acc={score.all_acc:.4f}")

    rows = [(s.label, s.value, format_float(s.all_acc), format_float(s.old_acc), format_float(s.new_acc)) for s in scores]
    _write(config, out_csv, _csv_text(SWEEP_COLUMNS, rows))
    return scores


def run_ablation(
    config: RunConfig,
    data_path: PathLike,
    out_csv: PathLike,
    seeds: Optional[Sequence[int]] = None,
    variants: Sequence[str] = tuple(ABLATION_VARIANTS),
    logger: Logger = None,
) -> Dict[str, float]:
    """Train every variant for every seed; returns the median all_acc per variant."""
    unknown = [name for name in variants if name not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"Unknown ablation variants {unknown}; expected {list(ABLATION_VARIANTS)}")
    seeds = list(seeds) if seeds else [config.train.seed]
    ds = load_dataset(data_path)

    scores: List[RunScore] = []
    for name in variants:
        for seed in seeds:
            variant = config.with_overrides({**ABLATION_VARIANTS[name], "train.seed": str(seed)})
            score = train_and_score(variant, ds)
            scores.append(RunScore(name, str(seed), score.all_acc, score.old_acc, score.new_acc))
            _emit(logger, f"[ablate] {name} seed={seed}: all_acc={score.all_acc:.4f}")

    rows = [(s.label, s.value, format_float(s.all_acc), format_float(s.old_acc), format_float(s.new_acc)) for s in scores]
    _write(config, out_csv, _csv_text(ABLATION_COLUMNS, rows))
    return {
        name: statistics.median(s.all_acc for s in scores if s.label == name)
        for name in variants
    }
