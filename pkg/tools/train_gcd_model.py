#!/usr/bin/env python3
"""
GCD Model Trainer
Two-stage schedule over a feature dataset:

    stage 1   labeled batches, supervised cross-entropy on two augmented views
    stage 2   all records; per epoch the vote table and memory bank are
              refreshed, then every batch minimizes the full weighted objective

Plus the SGD update, the feature-view augmentation and a finite-difference
gradient check of the complete objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tools.cluster_evaluation import EvalConfig, estimate_k, evaluate
from tools.consistency_voting import VoteConfig, VoteTable, refresh_votes
from tools.feature_dataset import Dataset, make_batches
from tools.gcd_losses import (
    COMPONENTS,
    LossComponent,
    LossOptions,
    LossWeights,
    Temperatures,
    check_loss_bounds,
    classification_losses,
    hcl_loss,
    logit_distill_loss,
    prototype_contrastive_loss,
    total_loss,
)
from tools.gcd_model import ModelConfig, ModelParams, backward, embed_records, forward, init_params
from tools.prototype_memory import MemoryBank, MemoryConfig, build_bank, refresh_bank, sample_memory_subset
from tools.residual_fusion import FusionConfig
from tools.seeding import derive_seed, make_rng

PRECISIONS = {"float64": np.float64, "float32": np.float32}
LR_SCHEDULES = ("constant", "cosine")
METRICS_COLUMNS = ("epoch",) + COMPONENTS + ("total", "all_acc", "old_acc", "new_acc")

Logger = Optional[Callable[[str], None]]
Views = Tuple[np.ndarray, np.ndarray, np.ndarray]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, tensor: str):
        super().__init__(f"Gradient of tensor {tensor} contains non-finite entries")
        self.tensor = tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs_stage1: int = 30
    epochs_stage2: int = 50
    aug_sigma: float = 0.05
    aug_drop: float = 0.1
    seed: int = 0
    precision: str = "float64"
    lr_schedule: str = "constant"
    eval_every_epoch: bool = True

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"train.lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"train.momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ValueError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("Epoch counts must be >= 0")
        if not self.aug_sigma >= 0:
            raise ValueError(f"train.aug_sigma must be >= 0, got {self.aug_sigma}")
        if not 0.0 <= self.aug_drop <= 1.0:
            raise ValueError(f"train.aug_drop must be in [0, 1], got {self.aug_drop}")
        if self.seed < 0:
            raise ValueError(f"train.seed must be non-negative, got {self.seed}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"train.precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"train.lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")


@dataclass(frozen=True)
class AblationConfig:
    fusion: bool = True
    hcl: bool = True
    feature_proto: bool = True
    logit_proto: bool = True


@dataclass(frozen=True)
class TrainingSetup:
    """Every section the trainer reads, bundled."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    fusion: FusionConfig = FusionConfig()
    vote: VoteConfig = VoteConfig()
    temps: Temperatures = Temperatures()
    weights: LossWeights = LossWeights()
    options: LossOptions = LossOptions()
    memory: MemoryConfig = MemoryConfig()
    ablation: AblationConfig = AblationConfig()
    eval: EvalConfig = EvalConfig()

    def validate(self) -> None:
        for section in (self.model, self.train, self.fusion, self.vote, self.temps,
                        self.weights, self.options, self.memory, self.eval):
            section.validate()


@dataclass
class EpochMetrics:
    epoch: int
    l_cls_s: float = 0.0
    l_cls_u: float = 0.0
    l_c: float = 0.0
    l_s: float = 0.0
    l_hcl: float = 0.0
    total: float = 0.0
    all_acc: Optional[float] = None
    old_acc: Optional[float] = None
    new_acc: Optional[float] = None


@dataclass
class StageResult:
    params: ModelParams
    metrics: List[EpochMetrics] = field(default_factory=list)


@dataclass
class TrainingResult:
    params: ModelParams
    metrics: List[EpochMetrics]
    k_estimate: Optional[int] = None
    k_scores: Dict[int, float] = field(default_factory=dict)


def _emit(logger: Logger, message: str) -> None:
    if logger:
        logger(message)


def augment_views(
    f_s: np.ndarray,
    f_t: np.ndarray,
    f_st: np.ndarray,
    record_ids: Sequence[int],
    seed: int,
    sigma: float,
    drop_prob: float,
    dtype=np.float64,
) -> Tuple[Views, Views]:
    """Two stochastic views per record: (x + N(0, sigma^2)) * keep_mask.

    One channel mask per (record, view) is shared by f_s, f_t and f_st; noise
    is drawn independently for each. Deterministic per (seed, record id, view).
    """
    base = [np.atleast_2d(np.asarray(x, dtype=dtype)) for x in (f_s, f_t, f_st)]
    ids = [int(i) for i in record_ids]
    if len(ids) != base[0].shape[0]:
        raise ValueError(f"Got {len(ids)} record ids for {base[0].shape[0]} rows")
    channels = base[0].shape[1]
    views = []
    for view in (0, 1):
        out = [np.empty_like(x) for x in base]
        for row, record_id in enumerate(ids):
            rng = make_rng(seed, record_id, view)
            keep = (rng.random(channels) >= drop_prob).astype(dtype)
            noise = rng.standard_normal((3, channels)).astype(dtype) * dtype(sigma)
            for k in range(3):
                out[k][row] = (base[k][row] + noise[k]) * keep
        views.append(tuple(out))
    return views[0], views[1]


def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], cfg: TrainConfig, lr: Optional[float] = None) -> ModelParams:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr * v."""
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    step = cfg.lr if lr is None else lr
    for name in params.names():
        velocity = params.momentum[name]
        velocity *= cfg.momentum
        velocity += grads[name] + cfg.weight_decay * params.tensors[name]
        params.tensors[name] -= step * velocity
    return params


def learning_rate(cfg: TrainConfig, epoch: int, total_epochs: int) -> float:
    if cfg.lr_schedule == "constant" or total_epochs <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass(frozen=True)
class BatchInputs:
    indices: np.ndarray
    view_a: Views
    view_b: Views
    labels: np.ndarray
    c_sub: Optional[np.ndarray] = None
    bank: Optional[MemoryBank] = None
    proto_rows: Optional[np.ndarray] = None


@dataclass
class BatchResult:
    total: float
    values: Dict[str, float]
    teacher: Tuple[np.ndarray, np.ndarray]


def prepare_batch(
    ds: Dataset,
    indices: np.ndarray,
    setup: TrainingSetup,
    seed: int,
    votes: Optional[VoteTable] = None,
    bank: Optional[MemoryBank] = None,
) -> BatchInputs:
    labels = ds.training_labels()[indices].astype(np.int64)
    view_a, view_b = augment_views(
        ds.f_s[indices],
        ds.f_t[indices],
        ds.f_st[indices],
        ds.ids[indices],
        seed,
        setup.train.aug_sigma,
        setup.train.aug_drop,
        dtype=setup.train.dtype,
    )
    return BatchInputs(
        indices=indices,
        view_a=view_a,
        view_b=view_b,
        labels=labels,
        c_sub=None if votes is None else votes.submatrix(indices),
        bank=bank,
        proto_rows=None if bank is None else bank.rows_for(labels),
    )


def _per_view(fn, result_a, result_b, *args, **kwargs):
    out_a = fn(result_a, *args, **kwargs)
    out_b = fn(result_b, *args, **kwargs)
    return out_a, out_b


def batch_objective(
    params: ModelParams,
    batch: BatchInputs,
    setup: TrainingSetup,
    supervised_only: bool = False,
    teacher: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> BatchResult:
    """Evaluate the batch objective and fill ``params.grads``.

    ``teacher`` pins the cross-view targets (they are constants of the step).
    """
    params.zero_grad()
    use_fusion = setup.ablation.fusion
    fa = forward(params, *batch.view_a, setup.fusion, use_fusion)
    fb = forward(params, *batch.view_b, setup.fusion, use_fusion)

    cls = classification_losses(fa.logits, fb.logits, batch.labels, setup.options, teacher=teacher)
    components: Dict[str, LossComponent] = {
        "l_cls_s": LossComponent(cls.cls_s, {"logits_a": cls.grad_a_s, "logits_b": cls.grad_b_s}),
    }

    if supervised_only:
        weights = LossWeights(lambda_sup=1.0, lambda_unsup=0.0, lambda_s=0.0)
    else:
        weights = setup.weights
        components["l_cls_u"] = LossComponent(cls.cls_u, {"logits_a": cls.grad_a_u, "logits_b": cls.grad_b_u})

        if setup.ablation.hcl and batch.c_sub is not None:
            reduction = setup.options.hcl_reduction
            (la, ga), (lb, gb) = _per_view(hcl_loss, fa.embedding, fb.embedding, batch.c_sub, setup.temps, reduction)
            components["l_hcl"] = LossComponent(0.5 * (la + lb), {"emb_a": 0.5 * ga, "emb_b": 0.5 * gb})

        bank, rows = batch.bank, batch.proto_rows
        if setup.ablation.feature_proto and bank is not None and len(bank.classes) >= 2:
            (la, ga, _), (lb, gb, _) = _per_view(
                prototype_contrastive_loss,
                fa.embedding,
                fb.embedding,
                rows,
                bank.feat_protos,
                setup.temps.tau_cl,
                mode=setup.options.proto_mode,
            )
            components["l_c"] = LossComponent(0.5 * (la + lb), {"emb_a": 0.5 * ga, "emb_b": 0.5 * gb})

        if setup.ablation.logit_proto and bank is not None:
            (la, ga, _), (lb, gb, _) = _per_view(
                logit_distill_loss,
                fa.logits,
                fb.logits,
                rows,
                bank.sharpened,
                setup.temps.tau_sl,
                order=setup.options.kl_order,
            )
            components["l_s"] = LossComponent(0.5 * (la + lb), {"logits_a": 0.5 * ga, "logits_b": 0.5 * gb})

    total, grads = total_loss(components, weights)
    check_loss_bounds(components, params.num_classes, setup.temps, setup.options)

    backward(params, fa, grads.get("emb_a"), grads.get("logits_a"))
    backward(params, fb, grads.get("emb_b"), grads.get("logits_b"))
    return BatchResult(
        total=total,
        values={name: components[name].value for name in components},
        teacher=cls.teacher,
    )


def _average(epoch: int, results: List[BatchResult]) -> EpochMetrics:
    metrics = EpochMetrics(epoch=epoch)
    if not results:
        return metrics
    for name in COMPONENTS:
        setattr(metrics, name, float(np.mean([r.values.get(name, 0.0) for r in results])))
    metrics.total = float(np.mean([r.total for r in results]))
    return metrics


def _evaluate_epoch(ds: Dataset, params: ModelParams, setup: TrainingSetup, metrics: EpochMetrics, k: int) -> None:
    if not setup.train.eval_every_epoch or ds.unlabeled_indices().size == 0:
        return
    report = evaluate(ds, params, k, setup.eval.space, setup.eval.seed, setup.fusion, setup.ablation.fusion)
    metrics.all_acc, metrics.old_acc, metrics.new_acc = report.all_acc, report.old_acc, report.new_acc


def train_stage1(
    ds: Dataset,
    setup: TrainingSetup,
    params: Optional[ModelParams] = None,
    logger: Logger = None,
    total_epochs: Optional[int] = None,
) -> StageResult:
    """Supervised cross-entropy over labeled batches."""
    cfg = setup.train
    if params is None:
        params = init_params(ds.dim, ds.num_classes_total, setup.model, derive_seed(cfg.seed, "init"), cfg.dtype)
    if ds.labeled_indices().size == 0:
        raise ValueError("Stage 1 needs labeled records")
    total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2 if total_epochs is None else total_epochs

    result = StageResult(params=params)
    for epoch in range(cfg.epochs_stage1):
        lr = learning_rate(cfg, epoch, total_epochs)
        batches = make_batches(ds, cfg.batch_size, derive_seed(cfg.seed, "stage1", epoch), labeled_only=True)
        aug_seed = derive_seed(cfg.seed, "augment", "stage1", epoch)
        outcomes = []
        for indices in batches:
            batch = prepare_batch(ds, indices, setup, aug_seed)
            outcomes.append(batch_objective(params, batch, setup, supervised_only=True))
            sgd_step(params, params.grads, cfg, lr=lr)
        metrics = _average(epoch + 1, outcomes)
        _evaluate_epoch(ds, params, setup, metrics, setup.eval.resolve_k(ds.num_classes_total))
        result.metrics.append(metrics)
        _emit(logger, f"[stage 1] epoch {epoch + 1}/{cfg.epochs_stage1} l_cls_s={metrics.l_cls_s:.4f}")
    return result


def train_stage2(
    ds: Dataset,
    params: ModelParams,
    setup: TrainingSetup,
    logger: Logger = None,
    n_total: Optional[int] = None,
    epoch_offset: int = 0,
    total_epochs: Optional[int] = None,
) -> StageResult:
    """Full objective over mixed batches with per-epoch vote and bank refresh.

    ``n_total`` overrides |C_N| for vote level sizes and evaluation k.
    """
    cfg = setup.train
    n_total = ds.num_classes_total if n_total is None else n_total
    total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2 if total_epochs is None else total_epochs
    result = StageResult(params=params)
    if cfg.epochs_stage2 == 0:
        return result

    setup.vote.validate(n_total)
    members = sample_memory_subset(ds, setup.memory.fraction, derive_seed(cfg.seed, "memory"))
    eval_k = setup.eval.k if setup.eval.k is not None else n_total
    bank = None
    if setup.ablation.feature_proto or setup.ablation.logit_proto:
        bank = build_bank(ds, params, setup.memory, cfg.seed, setup.temps.tau_tl, epoch=epoch_offset, member_indices=members)

    for epoch in range(cfg.epochs_stage2):
        global_epoch = epoch_offset + epoch
        lr = learning_rate(cfg, global_epoch, total_epochs)

        votes = None
        if setup.ablation.hcl:
            embeddings = embed_records(params, ds, setup.fusion, setup.ablation.fusion)
            votes = refresh_votes(ds, embeddings, setup.vote, derive_seed(cfg.seed, "votes", epoch), n_total)
        if bank is not None:
            bank = refresh_bank(bank, params, ds, global_epoch + 1, setup.temps.tau_tl)

        batches = make_batches(ds, cfg.batch_size, derive_seed(cfg.seed, "stage2", epoch), labeled_only=False)
        aug_seed = derive_seed(cfg.seed, "augment", "stage2", epoch)
        outcomes = []
        for indices in batches:
            batch = prepare_batch(ds, indices, setup, aug_seed, votes=votes, bank=bank)
            outcomes.append(batch_objective(params, batch, setup))
            sgd_step(params, params.grads, cfg, lr=lr)

        metrics = _average(global_epoch + 1, outcomes)
        _evaluate_epoch(ds, params, setup, metrics, eval_k)
        result.metrics.append(metrics)
        acc = "" if metrics.all_acc is None else f" all_acc={metrics.all_acc:.4f}"
        _emit(logger, f"[stage 2] epoch {epoch + 1}/{cfg.epochs_stage2} total={metrics.total:.4f}{acc}")
    return result


def train(ds: Dataset, setup: TrainingSetup, logger: Logger = None) -> TrainingResult:
    """Stage 1, optional class-count estimation, stage 2."""
    setup.validate()
    cfg = setup.train
    total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2
    _emit(logger, f"Training on {len(ds)} records ({ds.labeled_indices().size} labeled, {ds.num_classes_total} classes)")

    stage1 = train_stage1(ds, setup, logger=logger, total_epochs=total_epochs)
    params = stage1.params

    n_total = ds.num_classes_total
    k_estimate, k_scores = None, {}
    if setup.vote.k_unknown:
        estimate = estimate_k(
            ds, params, setup.eval.resolve_grid(ds), setup.eval.seed, setup.eval.space, setup.fusion, setup.ablation.fusion
        )
        k_estimate, k_scores = estimate.k, estimate.scores
        n_total = estimate.k
        _emit(logger, f"Estimated class count: {estimate.k}")

    stage2 = train_stage2(
        ds, params, setup, logger=logger, n_total=n_total, epoch_offset=cfg.epochs_stage1, total_epochs=total_epochs
    )
    return TrainingResult(
        params=stage2.params,
        metrics=stage1.metrics + stage2.metrics,
        k_estimate=k_estimate,
        k_scores=k_scores,
    )


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tol: float
    total: float

    @property
    def failing(self) -> List[str]:
        return [name for name, err in self.errors.items() if not err < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failing

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def grad_check(
    params: ModelParams,
    batch: BatchInputs,
    setup: TrainingSetup,
    step: float = 1e-5,
    tol: float = 1e-6,
    corrupt: Optional[str] = None,
) -> GradCheckReport:
    """Compare every analytic parameter gradient with central differences.

    Error per tensor: max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8).
    ``corrupt`` names a tensor whose analytic gradient is shifted by 1 as a
    negative control.
    """
    base = batch_objective(params, batch, setup)
    analytic = {name: grad.copy() for name, grad in params.grads.items()}
    if corrupt is not None:
        if corrupt not in analytic:
            raise ValueError(f"Unknown tensor {corrupt!r}; expected one of {params.names()}")
        analytic[corrupt] = analytic[corrupt] + 1.0

    errors: Dict[str, float] = {}
    for name in params.names():
        flat = params.tensors[name].reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = batch_objective(params, batch, setup, teacher=base.teacher).total
            flat[i] = original - step
            minus = batch_objective(params, batch, setup, teacher=base.teacher).total
            flat[i] = original
            numeric[i] = (plus - minus) / (2.0 * step)
        expected = analytic[name].reshape(-1)
        scale = max(float(np.max(np.abs(expected))), float(np.max(np.abs(numeric))), 1e-8)
        errors[name] = float(np.max(np.abs(expected - numeric))) / scale

    params.zero_grad()
    return GradCheckReport(errors=errors, tol=tol, total=base.total)
