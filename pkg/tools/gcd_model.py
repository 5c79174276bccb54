"""Trainable model: fusion gate, projection head and classifier G."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from tools.feature_dataset import Dataset
from tools.residual_fusion import FusionCache, FusionConfig, GateParams, fuse, fuse_backward
from tools.seeding import make_rng

HEADS = ("projector", "classifier")
NORM_EPS = 1e-12
_EMBED_CHUNK = 2048


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    proj_dim: int = 64

    def validate(self) -> None:
        if self.hidden < 1 or self.proj_dim < 1:
            raise ValueError(f"model.hidden and model.proj_dim must be >= 1, got {self.hidden}, {self.proj_dim}")


def tensor_shapes(dim: int, num_classes: int, cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {"gate.W": (dim, dim), "gate.b": (dim,)}
    for head, out_dim in (("projector", cfg.proj_dim), ("classifier", num_classes)):
        fan = [dim, cfg.hidden, cfg.hidden, out_dim]
        for layer in (1, 2, 3):
            shapes[f"{head}.l{layer}.W"] = (fan[layer], fan[layer - 1])
            shapes[f"{head}.l{layer}.b"] = (fan[layer],)
    return shapes


@dataclass
class ModelParams:
    """Named tensors with their gradient accumulators and momentum buffers."""

    tensors: Dict[str, np.ndarray]
    grads: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray]

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], dtype=np.float64) -> "ModelParams":
        named = {name: np.array(value, dtype=dtype) for name, value in tensors.items()}
        params = cls(
            tensors=named,
            grads={name: np.zeros_like(value) for name, value in named.items()},
            momentum={name: np.zeros_like(value) for name, value in named.items()},
        )
        params.validate()
        return params

    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return self.tensors["gate.W"].dtype

    @property
    def dim(self) -> int:
        return self.tensors["gate.W"].shape[0]

    @property
    def hidden(self) -> int:
        return self.tensors["projector.l1.W"].shape[0]

    @property
    def proj_dim(self) -> int:
        return self.tensors["projector.l3.W"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.tensors["classifier.l3.W"].shape[0]

    @property
    def gate(self) -> GateParams:
        return GateParams(W=self.tensors["gate.W"], b=self.tensors["gate.b"])

    def validate(self) -> None:
        expected = tensor_shapes(self.dim, self.num_classes, ModelConfig(self.hidden, self.proj_dim))
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"Model tensors do not match the architecture (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            value = self.tensors[name]
            if value.shape != shape:
                raise ValueError(f"Tensor {name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"Tensor {name} contains non-finite entries")

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def copy(self) -> "ModelParams":
        return ModelParams(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            grads={k: v.copy() for k, v in self.grads.items()},
            momentum={k: v.copy() for k, v in self.momentum.items()},
        )


def init_params(dim: int, num_classes: int, cfg: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Uniform fan-in init for perceptron weights, zero biases, zero gate."""
    cfg.validate()
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(dim, num_classes, cfg).items():
        if name.startswith("gate.") or name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        limit = np.sqrt(6.0 / shape[1])
        tensors[name] = make_rng(seed, "init", name).uniform(-limit, limit, size=shape).astype(dtype)
    return ModelParams.from_tensors(tensors, dtype=dtype)


@dataclass(frozen=True)
class MLPCache:
    activations: Tuple[np.ndarray, ...]


def mlp_forward(params: ModelParams, head: str, x: np.ndarray) -> Tuple[np.ndarray, MLPCache]:
    t = params.tensors
    h = x
    activations = [x]
    for layer in (1, 2):
        h = np.tanh(h @ t[f"{head}.l{layer}.W"].T + t[f"{head}.l{layer}.b"])
        activations.append(h)
    out = h @ t[f"{head}.l3.W"].T + t[f"{head}.l3.b"]
    return out, MLPCache(tuple(activations))


def mlp_backward(params: ModelParams, head: str, cache: MLPCache, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate layer gradients into ``params.grads``; return grad w.r.t. the input."""
    grad = grad_out
    for layer in (3, 2, 1):
        inputs = cache.activations[layer - 1]
        params.grads[f"{head}.l{layer}.W"] += grad.T @ inputs
        params.grads[f"{head}.l{layer}.b"] += grad.sum(axis=0)
        grad = grad @ params.tensors[f"{head}.l{layer}.W"]
        if layer > 1:
            grad = grad * (1.0 - inputs * inputs)
    return grad


def normalize_rows(y: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    scale = norm + NORM_EPS
    return y / scale, (y, norm, scale)


def normalize_rows_backward(cache: Tuple[np.ndarray, np.ndarray, np.ndarray], grad: np.ndarray) -> np.ndarray:
    y, norm, scale = cache
    safe_norm = np.where(norm > 0, norm, 1.0)
    return grad / scale - y * np.sum(grad * y, axis=1, keepdims=True) / (scale * scale * safe_norm)


@dataclass(frozen=True)
class ForwardResult:
    f_stf: np.ndarray
    embedding: np.ndarray
    logits: np.ndarray
    fusion_cache: Optional[FusionCache]
    projector_cache: MLPCache
    norm_cache: Tuple[np.ndarray, np.ndarray, np.ndarray]
    classifier_cache: MLPCache


def forward(
    params: ModelParams,
    f_s: np.ndarray,
    f_t: np.ndarray,
    f_st: np.ndarray,
    fusion: FusionConfig = FusionConfig(),
    use_fusion: bool = True,
) -> ForwardResult:
    dtype = params.dtype
    f_s, f_t, f_st = (np.atleast_2d(np.asarray(x, dtype=dtype)) for x in (f_s, f_t, f_st))
    if f_st.shape[1] != params.dim:
        raise ValueError(f"Feature dim {f_st.shape[1]} does not match model dim {params.dim}")

    fusion_cache = None
    if use_fusion:
        f_stf, fusion_cache = fuse(f_s, f_t, f_st, params.gate, fusion)
    else:
        f_stf = f_st

    projected, projector_cache = mlp_forward(params, "projector", f_stf)
    embedding, norm_cache = normalize_rows(projected)
    logits, classifier_cache = mlp_forward(params, "classifier", f_stf)
    return ForwardResult(f_stf, embedding, logits, fusion_cache, projector_cache, norm_cache, classifier_cache)


def backward(
    params: ModelParams,
    result: ForwardResult,
    grad_embedding: Optional[np.ndarray] = None,
    grad_logits: Optional[np.ndarray] = None,
) -> None:
    grad_f_stf = np.zeros_like(result.f_stf)
    if grad_embedding is not None:
        grad_projected = normalize_rows_backward(result.norm_cache, grad_embedding)
        grad_f_stf = grad_f_stf + mlp_backward(params, "projector", result.projector_cache, grad_projected)
    if grad_logits is not None:
        grad_f_stf = grad_f_stf + mlp_backward(params, "classifier", result.classifier_cache, grad_logits)
    if result.fusion_cache is not None:
        _, _, _, grad_W, grad_b = fuse_backward(result.fusion_cache, grad_f_stf)
        params.grads["gate.W"] += grad_W
        params.grads["gate.b"] += grad_b


def project_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Normalized projection of raw features (no fusion)."""
    projected, _ = mlp_forward(params, "projector", np.atleast_2d(np.asarray(x, dtype=params.dtype)))
    return normalize_rows(projected)[0]


def classify(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=params.dtype))
    if x.shape[1] != params.dim:
        raise ValueError(f"Classifier input dim {x.shape[1]} does not match model dim {params.dim}")
    return mlp_forward(params, "classifier", x)[0]


def embed_records(
    params: ModelParams,
    ds: Dataset,
    fusion: FusionConfig = FusionConfig(),
    use_fusion: bool = True,
) -> np.ndarray:
    """Normalized projection of every record's fused features."""
    chunks = []
    for start in range(0, len(ds), _EMBED_CHUNK):
        stop = start + _EMBED_CHUNK
        result = forward(params, ds.f_s[start:stop], ds.f_t[start:stop], ds.f_st[start:stop], fusion, use_fusion)
        chunks.append(result.embedding)
    return np.concatenate(chunks, axis=0)
