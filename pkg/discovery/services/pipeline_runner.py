"""Run wrappers around the deterministic tool modules: generate, train, evaluate, inspect."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Union

import numpy as np

from tools.cluster_evaluation import EvalReport, estimate_k, evaluate
from tools.consistency_voting import VoteTable, refresh_votes
from tools.feature_dataset import Dataset, DimensionMismatchError, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from tools.gcd_model import ModelConfig, ModelParams, embed_records, init_params
from tools.prototype_memory import build_bank
from tools.seeding import derive_seed, make_rng
from tools.train_gcd_model import GradCheckReport, grad_check, prepare_batch, train

from discovery.config import RunConfig
from discovery.services.serializers import eval_report_json, eval_report_to_dict, metrics_to_rows, vote_counts_csv, vote_scores_csv
from discovery.services.storage import ArtifactStorage, load_checkpoint, save_checkpoint, sidecar_path

Logger = Optional[Callable[[str], None]]
PathLike = Union[str, Path]

GRADCHECK_SPATIAL = 2
GRADCHECK_TEMPORAL = 2
GRADCHECK_SAMPLES = 8


def _emit(logger: Logger, message: str) -> None:
    if logger:
        logger(message)


def _write_sidecar(config: RunConfig, artifact: PathLike) -> Path:
    return config.save(sidecar_path(artifact))


def _load_model(checkpoint_path: PathLike, ds: Dataset) -> ModelParams:
    params = load_checkpoint(checkpoint_path)
    if params.dim != ds.dim:
        raise DimensionMismatchError(f"Checkpoint expects {params.dim}-dim features, the dataset has {ds.dim}")
    return params


def run_generate(config: RunConfig, out_path: PathLike, logger: Logger = None) -> Dict:
    """Generate the synthetic feature file described by ``config.data``."""
    ds = generate_synthetic(config.data)
    output = save_dataset(ds, out_path)
    _write_sidecar(config, output)
    _emit(logger, f"Wrote {output} ({output.stat().st_size} bytes)")
    return {
        "path": str(output),
        "records": len(ds),
        "classes": ds.num_classes_total,
        "labeled": int(ds.labeled_indices().size),
    }


def run_training(
    config: RunConfig,
    data_path: PathLike,
    checkpoint_path: PathLike,
    metrics_path: PathLike,
    logger: Logger = None,
) -> Dict:
    """Two-stage training; writes the checkpoint, the per-epoch metrics CSV and a config sidecar."""
    ds = load_dataset(data_path)
    result = train(ds, config.training_setup(), logger=logger)

    checkpoint = save_checkpoint(result.params, checkpoint_path)
    metrics_file = Path(metrics_path)
    storage = ArtifactStorage(metrics_file.parent if str(metrics_file.parent) else ".")
    storage.write_metrics(metrics_file.name, metrics_to_rows(result.metrics))
    _write_sidecar(config, checkpoint)
    _emit(logger, f"Wrote checkpoint {checkpoint} and metrics {metrics_file}")

    final = result.metrics[-1] if result.metrics else None
    return {
        "checkpoint": str(checkpoint),
        "metrics": str(metrics_file),
        "epochs": len(result.metrics),
        "final_total": None if final is None else final.total,
        "final_all_acc": None if final is None else final.all_acc,
        "k_estimate": result.k_estimate,
    }


def run_evaluation(
    config: RunConfig,
    data_path: PathLike,
    checkpoint_path: Optional[PathLike] = None,
    k: Optional[int] = None,
    estimate: bool = False,
    k_grid: Optional[Iterable[int]] = None,
    space: Optional[str] = None,
    logger: Logger = None,
) -> EvalReport:
    """Cluster and score; ``estimate`` picks k from the grid first.

    The checkpoint may be omitted only for the raw_st space.
    """
    space = space or config.eval.space
    ds = load_dataset(data_path)
    params: Optional[ModelParams] = None
    if checkpoint_path is not None:
        params = _load_model(checkpoint_path, ds)
    elif space != "raw_st":
        raise ValueError(f"Evaluating in the {space} space needs a checkpoint")

    use_fusion = config.ablation.fusion
    scores: Dict[int, float] = {}
    if estimate:
        grid = tuple(k_grid) if k_grid is not None else config.eval.resolve_grid(ds)
        result = estimate_k(ds, params, grid, config.eval.seed, space, config.fusion, use_fusion)
        k_used, scores = result.k, result.scores
        _emit(logger, f"Estimated k={k_used} over grid {list(grid)}")
    else:
        k_used = k if k is not None else config.eval.resolve_k(ds.num_classes_total)

    report = evaluate(ds, params, k_used, space, config.eval.seed, config.fusion, use_fusion)
    _emit(logger, f"all_acc={report.all_acc:.4f} old_acc={report.old_acc:.4f} new_acc={report.new_acc:.4f} (k={k_used})")
    return replace(report, k_scores=scores)


def write_eval_report(config: RunConfig, report: EvalReport, out_path: PathLike) -> Path:
    """Eval report JSON with its config sidecar."""
    target = Path(out_path)
    storage = ArtifactStorage(target.parent if str(target.parent) else ".")
    storage.write_text(target.name, eval_report_json(report) + "\n")
    _write_sidecar(config, target)
    return target


def compute_votes(config: RunConfig, ds: Dataset, params: ModelParams) -> VoteTable:
    n_total = config.eval.resolve_k(ds.num_classes_total)
    embeddings = embed_records(params, ds, config.fusion, config.ablation.fusion)
    return refresh_votes(ds, embeddings, config.vote, derive_seed(config.train.seed, "votes", "inspect"), n_total)


def scores_path(out_path: PathLike) -> Path:
    target = Path(out_path)
    return target.with_name(f"{target.stem}_scores{target.suffix or '.csv'}")


def run_vote_dump(
    config: RunConfig,
    data_path: PathLike,
    checkpoint_path: PathLike,
    out_path: PathLike,
    logger: Logger = None,
) -> Dict:
    """Write w to ``out_path`` and c next to it as ``<stem>_scores.csv``."""
    ds = load_dataset(data_path)
    params = _load_model(checkpoint_path, ds)
    votes = compute_votes(config, ds, params)

    counts_file = Path(out_path)
    storage = ArtifactStorage(counts_file.parent if str(counts_file.parent) else ".")
    storage.write_text(counts_file.name, vote_counts_csv(votes, ds))
    scores_file = scores_path(counts_file)
    storage.write_text(scores_file.name, vote_scores_csv(votes, ds))
    _write_sidecar(config, counts_file)
    _write_sidecar(config, scores_file)
    _emit(logger, f"Wrote vote counts {counts_file} and consistency scores {scores_file}")
    return {"counts": str(counts_file), "scores": str(scores_file), "records": len(ds), "levels": votes.K}


def _gradcheck_levels(n_total: int, levels: int) -> int:
    """Largest usable level count <= ``levels`` for ``n_total`` clusters."""
    usable = 3
    while usable < levels and n_total // 2 ** (usable - 2) >= 2:
        usable += 1
    return usable


def gradcheck_dataset(config: RunConfig) -> Dataset:
    return generate_synthetic(
        SyntheticConfig(
            n_spatial_protos=GRADCHECK_SPATIAL,
            temporal_per_spatial=GRADCHECK_TEMPORAL,
            dim=config.data.dim,
            noise_sigma=max(config.data.noise_sigma, 0.1),
            samples_per_class=max(GRADCHECK_SAMPLES, config.gradcheck.batch),
            labeled_fraction=0.5,
            seed=config.data.seed,
            split=config.data.split,
        )
    )


def gradcheck_batch_indices(ds: Dataset, batch: int, seed: int) -> np.ndarray:
    """Half labeled, half unlabeled records, drawn with a seeded generator."""
    rng = make_rng(seed, "gradcheck-batch")
    labeled, unlabeled = ds.labeled_indices(), ds.unlabeled_indices()
    take_labeled = min(labeled.size, batch // 2)
    take_unlabeled = min(unlabeled.size, batch - take_labeled)
    chosen = np.concatenate(
        [rng.choice(labeled, take_labeled, replace=False), rng.choice(unlabeled, take_unlabeled, replace=False)]
    )
    return np.sort(chosen)


def run_gradcheck(config: RunConfig, corrupt: Optional[str] = None, logger: Logger = None) -> GradCheckReport:
    """Finite-difference check of the full objective on a small binary64 model."""
    gc = config.gradcheck
    ds = gradcheck_dataset(config)
    n_total = ds.num_classes_total
    levels = _gradcheck_levels(n_total, config.vote.levels)
    if levels != config.vote.levels:
        _emit(logger, f"Using {levels} vote levels for {n_total} classes")

    setup = replace(
        config.training_setup(),
        model=ModelConfig(hidden=gc.hidden, proj_dim=gc.proj_dim),
        train=replace(config.train, precision="float64"),
        vote=replace(config.vote, levels=levels),
    )
    seed = config.train.seed
    params = init_params(ds.dim, n_total, setup.model, derive_seed(seed, "init"), np.float64)
    # move the gate off its zero init
    jitter = make_rng(seed, "gradcheck-jitter")
    for name in ("gate.W", "gate.b"):
        params.tensors[name] += 0.1 * jitter.standard_normal(params.tensors[name].shape)

    votes = refresh_votes(
        ds, embed_records(params, ds, setup.fusion, setup.ablation.fusion), setup.vote, derive_seed(seed, "votes", 0)
    )
    bank = build_bank(ds, params, setup.memory, derive_seed(seed, "memory"), setup.temps.tau_tl)
    indices = gradcheck_batch_indices(ds, gc.batch, seed)
    batch = prepare_batch(ds, indices, setup, derive_seed(seed, "augment", "gradcheck"), votes=votes, bank=bank)

    _emit(logger, f"Checking {len(params.names())} tensors on a batch of {indices.size} records")
    report = grad_check(params, batch, setup, step=gc.step, tol=gc.tol, corrupt=corrupt)
    _emit(logger, f"max relative error {report.max_error:.3e} ({'pass' if report.passed else 'fail'})")
    return report


def run_pipeline(config: RunConfig, out_dir: PathLike, logger: Logger = None) -> Dict:
    """gen -> train -> eval into one output directory."""
    storage = ArtifactStorage(out_dir)
    data_file = storage.path("features.vgcd")
    checkpoint_file = storage.path("model.vgck")
    metrics_file = storage.path("metrics.csv")

    _emit(logger, "\n[generate] starting...")
    generated = run_generate(config, data_file, logger=logger)
    _emit(logger, "[train] starting...")
    trained = run_training(config, data_file, checkpoint_file, metrics_file, logger=logger)
    _emit(logger, "[eval] starting...")
    report = run_evaluation(
        config,
        data_file,
        checkpoint_file,
        k=trained["k_estimate"] if config.vote.k_unknown else None,
        logger=logger,
    )

    report_file = storage.write_json("eval_report.json", eval_report_to_dict(report))
    _write_sidecar(config, storage.path(report_file.path))
    _emit(logger, "[pipeline] complete")
    return {
        "output_dir": str(storage.root),
        "data": generated["path"],
        "checkpoint": trained["checkpoint"],
        "metrics": trained["metrics"],
        "report": str(storage.path(report_file.path)),
        "eval": eval_report_to_dict(report),
    }
