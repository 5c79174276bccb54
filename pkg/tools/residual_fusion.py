#!/usr/bin/env python3
"""
Residual Attention Fusion
Fuses the spatial, temporal and spatiotemporal views into f_stf:

    res  = (f_s + f_t) - 2 * f_st
    w    = softmax(f_st / (tau * (sum(f_st) + eps)))
    g    = sigmoid(W f_st + b)
    f_stf = f_st + g * res * w

All functions accept a single vector (C,) or a batch (B, C). The backward
pass is written out by hand and returns exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import expit, softmax


class StaleCacheError(ValueError):
    """Raised when a backward call does not match its forward cache."""


@dataclass(frozen=True)
class FusionConfig:
    tau_attn: float = 1.0
    epsilon: float = 1e-6

    def validate(self) -> None:
        if not self.tau_attn > 0:
            raise ValueError(f"fusion.tau_attn must be > 0, got {self.tau_attn}")
        if not self.epsilon > 0:
            raise ValueError(f"fusion.epsilon must be > 0, got {self.epsilon}")


@dataclass
class GateParams:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, dim: int, dtype=np.float64) -> "GateParams":
        return cls(W=np.zeros((dim, dim), dtype=dtype), b=np.zeros(dim, dtype=dtype))

    def validate(self, dim: int) -> None:
        if self.W.shape != (dim, dim) or self.b.shape != (dim,):
            raise ValueError(f"Gate shapes W{self.W.shape}, b{self.b.shape} do not match dim {dim}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("Gate parameters contain non-finite entries")


@dataclass(frozen=True)
class FusionCache:
    f_st: np.ndarray
    residual: np.ndarray
    attention: np.ndarray
    gate: np.ndarray
    denominator: np.ndarray
    W: np.ndarray
    tau_attn: float
    squeeze: bool


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"Expected a vector or a batch of vectors, got shape {x.shape}")
    return x, False


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"Feature views must share one shape, got {sorted(shapes)}")


def residual(f_s: np.ndarray, f_t: np.ndarray, f_st: np.ndarray) -> np.ndarray:
    f_s, f_t, f_st = np.asarray(f_s), np.asarray(f_t), np.asarray(f_st)
    _check_same_shape(f_s, f_t, f_st)
    return (f_s + f_t) - 2 * f_st


def _attention_denominator(f_st: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    # sign-preserving clamp: |sum + eps| >= eps, identical to sum + eps for positive sums
    total = np.sum(f_st, axis=-1, keepdims=True)
    sign = np.where(total < 0, -1.0, 1.0).astype(f_st.dtype)
    return cfg.tau_attn * sign * (np.abs(total) + cfg.epsilon)


def channel_attention(f_st: np.ndarray, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Per-instance softmax over channels of the sum-scaled f_st."""
    batch, squeeze = _as_batch(f_st)
    weights = softmax(batch / _attention_denominator(batch, cfg), axis=1)
    return weights[0] if squeeze else weights


def fuse(
    f_s: np.ndarray,
    f_t: np.ndarray,
    f_st: np.ndarray,
    gate: GateParams,
    cfg: FusionConfig = FusionConfig(),
) -> Tuple[np.ndarray, FusionCache]:
    s_batch, squeeze = _as_batch(f_s)
    t_batch, _ = _as_batch(f_t)
    st_batch, _ = _as_batch(f_st)
    _check_same_shape(s_batch, t_batch, st_batch)
    gate.validate(st_batch.shape[1])

    res = residual(s_batch, t_batch, st_batch)
    denominator = _attention_denominator(st_batch, cfg)
    attention = softmax(st_batch / denominator, axis=1)
    gate_value = expit(st_batch @ gate.W.T + gate.b)
    fused = st_batch + gate_value * res * attention

    cache = FusionCache(
        f_st=st_batch,
        residual=res,
        attention=attention,
        gate=gate_value,
        denominator=denominator,
        W=gate.W,
        tau_attn=cfg.tau_attn,
        squeeze=squeeze,
    )
    return (fused[0] if squeeze else fused), cache


def fuse_backward(
    cache: FusionCache,
    upstream_grad: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of <upstream_grad, f_stf> w.r.t. f_s, f_t, f_st, W and b."""
    grad, squeeze = _as_batch(upstream_grad)
    if grad.shape != cache.f_st.shape or squeeze != cache.squeeze:
        raise StaleCacheError(
            f"Upstream gradient shape {np.shape(upstream_grad)} does not match the cached forward pass {cache.f_st.shape}"
        )

    g, res, attn = cache.gate, cache.residual, cache.attention

    grad_res = grad * g * attn
    grad_gate = grad * res * attn
    grad_attn = grad * g * res

    grad_pre = grad_gate * g * (1.0 - g)
    grad_W = grad_pre.T @ cache.f_st
    grad_b = grad_pre.sum(axis=0)

    # softmax Jacobian, then x = f_st / D with D = tau * (sum(f_st) +- eps)
    grad_x = attn * (grad_attn - np.sum(grad_attn * attn, axis=1, keepdims=True))
    D = cache.denominator
    grad_from_attn = grad_x / D - cache.tau_attn * np.sum(grad_x * cache.f_st, axis=1, keepdims=True) / (D * D)

    grad_f_s = grad_res
    grad_f_t = grad_res.copy()
    grad_f_st = grad - 2.0 * grad_res + grad_pre @ cache.W + grad_from_attn

    if squeeze:
        return grad_f_s[0], grad_f_t[0], grad_f_st[0], grad_W, grad_b
    return grad_f_s, grad_f_t, grad_f_st, grad_W, grad_b
