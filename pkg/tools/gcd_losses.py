#!/usr/bin/env python3
"""
GCD Training Objectives
Every loss used by the two training stages, each returning its value together
with the exact gradient with respect to its inputs:

    hcl_loss                      consistency-weighted contrastive loss over a batch
    proto_contrastive_loss        instance-to-prototype contrastive loss
    sharpen                       low-temperature softmax of teacher logits
    logit_distill_loss            KL between sharpened class prototypes and student
    classification_losses         supervised CE + cross-view self-distillation
    total_loss                    weighted sum of the components above

Gradients are taken with respect to embeddings / logits; the trainer carries
them back through the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax, xlogy

COMPONENTS = ("l_cls_s", "l_cls_u", "l_c", "l_s", "l_hcl")
PROTO_MODES = ("standard", "literal")
KL_ORDERS = ("teacher_first", "printed")
HCL_REDUCTIONS = ("mean", "sum")

_UNIT_NORM_TOL = 1e-4


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"Loss component {component} is not finite ({value})")
        self.component = component
        self.value = value


class LossBoundError(FloatingPointError):
    def __init__(self, component: str, value: float, bound: float):
        super().__init__(f"Loss component {component} = {value} is below its lower bound {bound}")
        self.component = component
        self.value = value
        self.bound = bound


@dataclass(frozen=True)
class Temperatures:
    tau_h: float = 1.0
    tau_h_i: float = 1.0
    tau_cl: float = 0.05
    tau_tl: float = 0.1
    tau_sl: float = 1.0

    def validate(self) -> None:
        for name in ("tau_h", "tau_h_i", "tau_cl", "tau_tl", "tau_sl"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"loss.{name} must be a positive number, got {value}")
        if not self.tau_tl < 1.0:
            raise ValueError(f"loss.tau_tl must be < 1 to sharpen the teacher, got {self.tau_tl}")


@dataclass(frozen=True)
class LossWeights:
    lambda_sup: float = 0.45
    lambda_unsup: Optional[float] = None  # None -> 1 - lambda_sup
    lambda_s: float = 0.5

    @property
    def unsup(self) -> float:
        return 1.0 - self.lambda_sup if self.lambda_unsup is None else self.lambda_unsup

    def validate(self) -> None:
        for name, value in (("lambda_sup", self.lambda_sup), ("lambda_unsup", self.unsup), ("lambda_s", self.lambda_s)):
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"loss.{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossOptions:
    proto_mode: str = "standard"
    kl_order: str = "teacher_first"
    hcl_reduction: str = "sum"
    tau_s: float = 0.1
    tau_t: float = 0.05
    entropy_weight: float = 2.0

    def validate(self) -> None:
        if self.proto_mode not in PROTO_MODES:
            raise ValueError(f"loss.proto_mode must be one of {PROTO_MODES}, got {self.proto_mode!r}")
        if self.kl_order not in KL_ORDERS:
            raise ValueError(f"loss.kl_order must be one of {KL_ORDERS}, got {self.kl_order!r}")
        if self.hcl_reduction not in HCL_REDUCTIONS:
            raise ValueError(f"loss.hcl_reduction must be one of {HCL_REDUCTIONS}, got {self.hcl_reduction!r}")
        if not (self.tau_s > 0 and self.tau_t > 0):
            raise ValueError(f"loss.tau_s and loss.tau_t must be > 0, got {self.tau_s}, {self.tau_t}")
        if not self.entropy_weight >= 0:
            raise ValueError(f"loss.entropy_weight must be >= 0, got {self.entropy_weight}")


def _check_unit_rows(x: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > _UNIT_NORM_TOL:
        raise ValueError(f"{name} must be L2-normalized (largest norm deviation {worst:.3g})")


def hcl_loss(
    embeddings: np.ndarray,
    c_sub: np.ndarray,
    temps: Temperatures = Temperatures(),
    reduction: str = "sum",
) -> Tuple[float, np.ndarray]:
    """Consistency-weighted contrastive loss over one batch.

    L = - sum_i sum_{j != i} c_ij * log( exp(f_i.f_j / tau_h) / sum_{k != i} exp(f_i.f_k / tau_h_i) )

    ``reduction="mean"`` divides by the batch size. Returns the loss and its
    gradient with respect to ``embeddings``.
    """
    E = np.asarray(embeddings)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError(f"hcl_loss needs a batch of at least 2 embeddings, got shape {E.shape}")
    B = E.shape[0]
    c = np.asarray(c_sub, dtype=E.dtype)
    if c.shape != (B, B):
        raise ValueError(f"Consistency submatrix shape {c.shape} does not match batch size {B}")
    if reduction not in HCL_REDUCTIONS:
        raise ValueError(f"Unknown reduction {reduction!r}")
    _check_unit_rows(E, "hcl_loss embeddings")

    sim = E @ E.T
    off = ~np.eye(B, dtype=bool)
    scaled = np.where(off, sim / temps.tau_h_i, -np.inf)
    lse = logsumexp(scaled, axis=1)
    neg_prob = softmax(scaled, axis=1)

    weights = np.where(off, c, 0.0)
    row_mass = weights.sum(axis=1, keepdims=True)
    loss = float(np.sum(weights * (lse[:, None] - sim / temps.tau_h)))

    grad_sim = -weights / temps.tau_h + row_mass * neg_prob / temps.tau_h_i
    grad = (grad_sim + grad_sim.T) @ E

    if reduction == "mean":
        loss /= B
        grad = grad / B
    return loss, grad


def prototype_contrastive_loss(
    embeddings: np.ndarray,
    rows: np.ndarray,
    prototypes: np.ndarray,
    tau_cl: float,
    mode: str = "standard",
) -> Tuple[float, np.ndarray, int]:
    """Batched instance-to-prototype loss averaged over members with ``rows >= 0``.

    ``rows[i]`` is the prototype row of member i's class, -1 to skip it.
    Returns (loss, grad w.r.t. embeddings, number of contributing members).
    """
    E = np.asarray(embeddings)
    P = np.asarray(prototypes, dtype=E.dtype)
    rows = np.asarray(rows, dtype=np.int64)
    if mode not in PROTO_MODES:
        raise ValueError(f"Unknown prototype loss mode {mode!r}")
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValueError(f"Prototype contrastive loss needs at least 2 prototypes, got shape {P.shape}")
    if P.shape[1] != E.shape[-1]:
        raise ValueError(f"Prototype dim {P.shape[1]} does not match embedding dim {E.shape[-1]}")
    if np.any(rows >= P.shape[0]):
        raise ValueError(f"Unknown prototype row {int(rows.max())} (only {P.shape[0]} prototypes)")

    grad = np.zeros_like(E)
    sel = np.flatnonzero(rows >= 0)
    if sel.size == 0:
        return 0.0, grad, 0
    _check_unit_rows(E[sel], "prototype loss embeddings")
    _check_unit_rows(P, "prototypes")

    target = rows[sel]
    logits = E[sel] @ P.T / tau_cl
    positive = np.zeros(logits.shape, dtype=bool)
    positive[np.arange(sel.size), target] = True
    # literal form drops the positive from the denominator
    denom_logits = np.where(positive, -np.inf, logits) if mode == "literal" else logits

    lse = logsumexp(denom_logits, axis=1)
    q = softmax(denom_logits, axis=1)
    n = sel.size
    loss = float(np.mean(lse - logits[np.arange(n), target]))
    grad[sel] = (q - positive.astype(E.dtype)) @ P / (tau_cl * n)
    return loss, grad, n


def proto_contrastive_loss(
    embedding: np.ndarray,
    class_id: int,
    prototypes: np.ndarray,
    tau_cl: float,
    mode: str = "standard",
) -> Tuple[float, np.ndarray]:
    P = np.asarray(prototypes)
    if not 0 <= class_id < P.shape[0]:
        raise ValueError(f"Unknown class id {class_id} for {P.shape[0]} stored prototypes")
    loss, grad, _ = prototype_contrastive_loss(
        np.asarray(embedding)[None, :], np.array([class_id]), P, tau_cl, mode=mode
    )
    return loss, grad[0]


def sharpen(mu: np.ndarray, tau_tl: float) -> np.ndarray:
    if not 0.0 < tau_tl < 1.0:
        raise ValueError(f"Sharpening temperature must be in (0, 1), got {tau_tl}")
    return softmax(np.asarray(mu) / tau_tl, axis=-1)


def logit_distill_loss(
    logits: np.ndarray,
    rows: np.ndarray,
    sharpened_protos: np.ndarray,
    tau_sl: float = 1.0,
    order: str = "teacher_first",
) -> Tuple[float, np.ndarray, int]:
    """Distill sharpened class prototypes into the student logits.

    Averaged over members with ``rows >= 0``. ``order="teacher_first"`` is
    KL(teacher || student); ``"printed"`` is KL(student || teacher). A batch
    without contributing members returns (0.0, zeros, 0).
    """
    z = np.asarray(logits)
    rows = np.asarray(rows, dtype=np.int64)
    if order not in KL_ORDERS:
        raise ValueError(f"Unknown KL order {order!r}")
    Q = np.asarray(sharpened_protos, dtype=z.dtype)
    if Q.ndim != 2 or Q.shape[1] != z.shape[1]:
        raise ValueError(f"Teacher prototypes shape {Q.shape} does not match logits shape {z.shape}")
    if np.any(rows >= Q.shape[0]):
        raise ValueError(f"Unknown prototype row {int(rows.max())} (only {Q.shape[0]} prototypes)")

    grad = np.zeros_like(z)
    sel = np.flatnonzero(rows >= 0)
    n = sel.size
    if n == 0:
        return 0.0, grad, 0

    log_p = log_softmax(z[sel], axis=1)
    p = np.exp(log_p)
    q = Q[rows[sel]]
    if order == "teacher_first":
        kl = np.sum(xlogy(q, q) - q * log_p, axis=1)
        grad_sel = p - q
    else:
        log_q = np.log(np.clip(q, np.finfo(q.dtype).tiny, None))
        gap = log_p - log_q
        kl = np.sum(p * gap, axis=1)
        grad_sel = p * (gap - np.sum(p * gap, axis=1, keepdims=True))

    grad[sel] = tau_sl * grad_sel / n
    return float(tau_sl * np.mean(kl)), grad, n


@dataclass
class ClsLosses:
    cls_s: float
    cls_u: float
    grad_a_s: np.ndarray
    grad_b_s: np.ndarray
    grad_a_u: np.ndarray
    grad_b_u: np.ndarray
    teacher: Tuple[np.ndarray, np.ndarray]
    mean_entropy: float


def teacher_targets(logits_a: np.ndarray, logits_b: np.ndarray, tau_t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Sharpened per-view targets; callers treat them as constants."""
    return softmax(np.asarray(logits_a) / tau_t, axis=1), softmax(np.asarray(logits_b) / tau_t, axis=1)


def _entropy_grad(p: np.ndarray, upstream: np.ndarray, tau: float) -> np.ndarray:
    # softmax(z / tau) Jacobian applied to an upstream gradient on p
    return p * (upstream - np.sum(p * upstream, axis=1, keepdims=True)) / tau


def classification_losses(
    logits_a: np.ndarray,
    logits_b: Optional[np.ndarray],
    labels: np.ndarray,
    opts: LossOptions = LossOptions(),
    teacher: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> ClsLosses:
    """Parametric classification losses on two augmented views.

    cls_s: cross-entropy of labeled members (labels >= 0) at tau_s, averaged
    over both views; 0 when the batch has no labeled member.
    cls_u: cross-view CE from the detached tau_t teacher of one view to the
    student of the other, minus entropy_weight * H(mean student distribution).
    """
    if logits_b is None:
        raise ValueError("classification_losses needs a second augmented view")
    z_a, z_b = np.asarray(logits_a), np.asarray(logits_b)
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError(f"View logits must share one (B, K) shape, got {z_a.shape} and {z_b.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = z_a.shape
    if labels.shape != (B,):
        raise ValueError(f"Expected {B} labels, got shape {labels.shape}")
    if np.any(labels >= K):
        raise ValueError(f"Label {int(labels.max())} out of range for {K} classes")

    tau_s = opts.tau_s
    log_p_a = log_softmax(z_a / tau_s, axis=1)
    log_p_b = log_softmax(z_b / tau_s, axis=1)
    p_a, p_b = np.exp(log_p_a), np.exp(log_p_b)

    grad_a_s = np.zeros_like(z_a)
    grad_b_s = np.zeros_like(z_b)
    labeled = np.flatnonzero(labels >= 0)
    cls_s = 0.0
    if labeled.size:
        y = labels[labeled]
        onehot = np.zeros((labeled.size, K), dtype=z_a.dtype)
        onehot[np.arange(labeled.size), y] = 1.0
        cls_s = float(-0.5 * (np.mean(log_p_a[labeled, y]) + np.mean(log_p_b[labeled, y])))
        grad_a_s[labeled] = 0.5 * (p_a[labeled] - onehot) / (tau_s * labeled.size)
        grad_b_s[labeled] = 0.5 * (p_b[labeled] - onehot) / (tau_s * labeled.size)

    if teacher is None:
        teacher = teacher_targets(z_a, z_b, opts.tau_t)
    q_a, q_b = teacher
    cross = float(-0.5 * (np.mean(np.sum(q_a * log_p_b, axis=1)) + np.mean(np.sum(q_b * log_p_a, axis=1))))
    grad_a_u = 0.5 * (p_a - q_b) / (tau_s * B)
    grad_b_u = 0.5 * (p_b - q_a) / (tau_s * B)

    p_mean = np.mean(np.concatenate([p_a, p_b], axis=0), axis=0)
    entropy = float(-np.sum(xlogy(p_mean, p_mean)))
    upstream = opts.entropy_weight * np.log(np.clip(p_mean, np.finfo(p_mean.dtype).tiny, None)) / (2 * B)
    grad_a_u = grad_a_u + _entropy_grad(p_a, upstream, tau_s)
    grad_b_u = grad_b_u + _entropy_grad(p_b, upstream, tau_s)

    return ClsLosses(
        cls_s=cls_s,
        cls_u=cross - opts.entropy_weight * entropy,
        grad_a_s=grad_a_s,
        grad_b_s=grad_b_s,
        grad_a_u=grad_a_u,
        grad_b_u=grad_b_u,
        teacher=(q_a, q_b),
        mean_entropy=entropy,
    )


@dataclass
class LossComponent:
    value: float = 0.0
    grads: Dict[str, np.ndarray] = field(default_factory=dict)


def component_weights(weights: LossWeights) -> Dict[str, float]:
    return {
        "l_cls_s": weights.lambda_sup,
        "l_c": weights.lambda_sup,
        "l_s": weights.lambda_sup * weights.lambda_s,
        "l_cls_u": weights.unsup,
        "l_hcl": weights.unsup,
    }


def total_loss(
    components: Mapping[str, LossComponent],
    weights: LossWeights = LossWeights(),
) -> Tuple[float, Dict[str, np.ndarray]]:
    """L = l_sup * (cls_s + l_c + l_s_weight * l_s) + l_unsup * (cls_u + hcl).

    Missing components count as zero. Gradients are summed per input key.
    """
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"Unknown loss components: {sorted(unknown)}")
    coeffs = component_weights(weights)
    total = 0.0
    grads: Dict[str, np.ndarray] = {}
    for name in COMPONENTS:
        component = components.get(name)
        if component is None:
            continue
        if not np.isfinite(component.value):
            raise NonFiniteLossError(name, component.value)
        coeff = coeffs[name]
        total += coeff * component.value
        for key, grad in component.grads.items():
            grads[key] = grads[key] + coeff * grad if key in grads else coeff * grad
    if not np.isfinite(total):
        raise NonFiniteLossError("total", total)
    return total, grads


def check_loss_bounds(
    components: Mapping[str, LossComponent],
    num_classes: int,
    temps: Temperatures = Temperatures(),
    opts: LossOptions = LossOptions(),
    tol: float = 1e-6,
) -> None:
    """Raise LossBoundError when a component falls below its analytic lower bound."""
    bounds = {"l_cls_s": 0.0, "l_s": 0.0, "l_cls_u": -opts.entropy_weight * float(np.log(num_classes))}
    if opts.proto_mode == "standard":
        bounds["l_c"] = 0.0
    if temps.tau_h == temps.tau_h_i:
        bounds["l_hcl"] = 0.0
    for name, bound in bounds.items():
        component = components.get(name)
        if component is None:
            continue
        if component.value < bound - tol * max(1.0, abs(bound)):
            raise LossBoundError(name, component.value, bound)
