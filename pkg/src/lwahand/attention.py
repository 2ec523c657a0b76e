"""Attention operators: query-only cross attention, attention pooling,
dense and separable cross-hand attention, and the pointwise MLP merge.

Public functions return plain outputs. The ``*_fwd`` / ``*_bwd`` pairs are what
the model's backward pass composes; backward functions return a dict of
gradients keyed by the same argument names the forward takes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import (
    ShapeError,
    activation_bwd,
    activation_fwd,
    softmax,
    softmax_bwd,
)

ATTENTION_NORMS = ("sqrt_d", "d")

# public operators; each has a cost formula in the FLOPs profiler
OPERATORS = (
    "query_only_cross_attention",
    "map_global_to_graph",
    "cross_hand_attention",
    "separable_self_attention",
    "separable_cross_hand_attention",
    "merge_cross_features",
)


class ConfigError(ValueError):
    """Raised for inconsistent operator configuration."""


@dataclass(frozen=True)
class MultiHeadConfig:
    heads: int
    dim: int
    tokens: int

    def __post_init__(self):
        if self.heads < 1 or self.dim < 1 or self.tokens < 1:
            raise ConfigError("heads, dim and tokens must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.tokens >= 7:
            warnings.warn(f"{self.tokens} tokens is outside the small-token regime (M < 7)", stacklevel=2)


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic M x P map from tokens to local positions."""

    weights: np.ndarray

    def row_sum_deviation(self) -> float:
        return float(np.max(np.abs(self.weights.sum(axis=1) - 1.0)))


@dataclass(frozen=True)
class CrossHandFeatures:
    left_to_right: np.ndarray
    right_to_left: np.ndarray


def _norm_value(dim: int, norm: str) -> float:
    if norm == "sqrt_d":
        return float(np.sqrt(dim))
    if norm == "d":
        return float(dim)
    raise ConfigError(f"attention_norm must be one of {ATTENTION_NORMS}, got {norm!r}")


# ---------------------------------------------------------------------------
# Query-only cross attention (local features -> tokens)
# ---------------------------------------------------------------------------


def query_only_cross_attention_fwd(local, tokens, w_q, w_o, heads: int):
    """Forward pass; ``w_q`` has shape (heads, d/heads, c/heads), ``w_o`` (c, d).

    Keys and values are the raw local features split into heads; only the
    token side is projected. Returns ``((attn_mean, update), cache)``.
    """
    local = np.asarray(local, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.float64)
    w_q = np.asarray(w_q, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    if local.ndim != 2 or tokens.ndim != 2:
        raise ShapeError(f"query_only_cross_attention: local {local.shape}, tokens {tokens.shape} must be 2-D")
    p, c = local.shape
    m, d = tokens.shape
    if d % heads or c % heads:
        raise ConfigError(f"dims (tokens {d}, local {c}) not divisible by {heads} heads")
    dh, ch = d // heads, c // heads
    if w_q.shape != (heads, dh, ch):
        raise ShapeError(f"W_Q shape {w_q.shape} != {(heads, dh, ch)}")
    if w_o.shape != (c, d):
        raise ShapeError(f"W_O shape {w_o.shape} != {(c, d)}")
    scale = 1.0 / np.sqrt(ch)
    ctx = np.empty((m, c))
    maps = np.empty((heads, m, p))
    qs = np.empty((heads, m, ch))
    for i in range(heads):
        z_i = tokens[:, i * dh : (i + 1) * dh]
        x_i = local[:, i * ch : (i + 1) * ch]
        q = z_i @ w_q[i]
        a = softmax((q @ x_i.T) * scale, axis=1)
        maps[i] = a
        qs[i] = q
        ctx[:, i * ch : (i + 1) * ch] = a @ x_i
    update = ctx @ w_o
    attn = maps.mean(axis=0)
    return (attn, update), (local, tokens, w_q, w_o, heads, maps, qs, ctx, scale)


def query_only_cross_attention_bwd(d_update, d_attn, cache) -> dict:
    local, tokens, w_q, w_o, heads, maps, qs, ctx, scale = cache
    c, d = w_o.shape
    dh, ch = d // heads, c // heads
    d_local = np.zeros_like(local)
    d_tokens = np.zeros_like(tokens)
    d_wq = np.zeros_like(w_q)
    if d_update is None:
        d_update = np.zeros((tokens.shape[0], d))
    d_wo = ctx.T @ d_update
    d_ctx = d_update @ w_o.T
    for i in range(heads):
        sl_x = slice(i * ch, (i + 1) * ch)
        sl_z = slice(i * dh, (i + 1) * dh)
        x_i = local[:, sl_x]
        a = maps[i]
        d_ctx_i = d_ctx[:, sl_x]
        d_a = d_ctx_i @ x_i.T
        if d_attn is not None:
            d_a = d_a + d_attn / heads
        d_local[:, sl_x] += a.T @ d_ctx_i
        d_s = softmax_bwd(d_a, a, axis=1) * scale
        d_q = d_s @ x_i
        d_local[:, sl_x] += d_s.T @ qs[i]
        d_wq[i] = tokens[:, sl_z].T @ d_q
        d_tokens[:, sl_z] = d_q @ w_q[i].T
    return {"local": d_local, "tokens": d_tokens, "w_q": d_wq, "w_o": d_wo}


def query_only_cross_attention(local, tokens, cfg: MultiHeadConfig, w_q, w_o):
    """Token update from local features; returns (AttentionMap, M x d update).

    The returned map is the mean of the per-head maps.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (cfg.tokens, cfg.dim):
        raise ShapeError(f"tokens shape {tokens.shape} != {(cfg.tokens, cfg.dim)}")
    (attn, update), _ = query_only_cross_attention_fwd(local, tokens, w_q, w_o, cfg.heads)
    return AttentionMap(attn), update


# ---------------------------------------------------------------------------
# Attention pooling into the graph domain
# ---------------------------------------------------------------------------


def map_global_to_graph(attn, local) -> np.ndarray:
    """Pool local features by attention rows: (M x P) @ (P x c)."""
    a = attn.weights if isinstance(attn, AttentionMap) else np.asarray(attn, dtype=np.float64)
    local = np.asarray(local, dtype=np.float64)
    if a.ndim != 2 or local.ndim != 2 or a.shape[1] != local.shape[0]:
        raise ShapeError(f"map_global_to_graph: attention {a.shape} incompatible with local {local.shape}")
    return a @ local


def map_global_to_graph_bwd(d_out, attn, local) -> dict:
    return {"attn": d_out @ local.T, "local": attn.T @ d_out}


# ---------------------------------------------------------------------------
# Dense cross-hand attention
# ---------------------------------------------------------------------------


def dense_attention_fwd(target, source, w_q, w_k, w_v, norm: str = "sqrt_d"):
    """softmax((target W_q)(source W_k)^T / n) (source W_v) for one direction."""
    if target.shape[1] != w_q.shape[0] or source.shape[1] != w_k.shape[0]:
        raise ShapeError(f"dense attention: features {target.shape}/{source.shape} vs projections {w_q.shape}")
    q = target @ w_q
    k = source @ w_k
    v = source @ w_v
    n = _norm_value(w_q.shape[1], norm)
    a = softmax(q @ k.T / n, axis=1)
    return a @ v, (target, source, w_q, w_k, w_v, q, k, v, a, n)


def dense_attention_bwd(d_out, cache) -> dict:
    target, source, w_q, w_k, w_v, q, k, v, a, n = cache
    d_v = a.T @ d_out
    d_s = softmax_bwd(d_out @ v.T, a, axis=1) / n
    d_q = d_s @ k
    d_k = d_s.T @ q
    return {
        "target": d_q @ w_q.T,
        "source": d_k @ w_k.T + d_v @ w_v.T,
        "w_q": target.T @ d_q,
        "w_k": source.T @ d_k,
        "w_v": source.T @ d_v,
    }


def _check_hands(left, right):
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.ndim != 2 or left.shape != right.shape:
        raise ShapeError(f"cross-hand attention: left {left.shape} and right {right.shape} must match")
    return left, right


def cross_hand_attention(left, right, weights: dict, norm: str = "sqrt_d") -> CrossHandFeatures:
    """Dense attention between the two hands' vertex features.

    ``weights`` maps ``"left.q"``, ``"left.k"``, ``"left.v"`` and the matching
    ``"right.*"`` keys to d x d projections. Right-to-left features use the
    left hand's query against the right hand's keys and values.
    """
    left, right = _check_hands(left, right)
    r2l, _ = dense_attention_fwd(left, right, weights["left.q"], weights["right.k"], weights["right.v"], norm)
    l2r, _ = dense_attention_fwd(right, left, weights["right.q"], weights["left.k"], weights["left.v"], norm)
    return CrossHandFeatures(left_to_right=l2r, right_to_left=r2l)


# ---------------------------------------------------------------------------
# Separable attention
# ---------------------------------------------------------------------------


def separable_context(x, w_i, w_k):
    """Context scores c_s = softmax(x W_I) and context vector c_v = sum_i c_s(i) (x W_K)(i)."""
    x = np.asarray(x, dtype=np.float64)
    scores = softmax(x @ np.asarray(w_i, dtype=np.float64), axis=0)
    keys = x @ np.asarray(w_k, dtype=np.float64)
    return scores, scores @ keys


def separable_attention_fwd(target, source, w_i, w_k, w_v, w_o, combine: str = "multiply", act: str = "silu"):
    """Separable attention where scores/keys come from ``source`` and values from ``target``.

    With ``target is source`` this is ordinary separable self-attention.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2 or target.ndim != 2 or source.shape[0] < 1:
        raise ShapeError(f"separable attention: bad shapes {target.shape}, {source.shape}")
    d = source.shape[1]
    if w_i.shape != (d,) or w_k.shape != (d, d) or w_v.shape[0] != target.shape[1]:
        raise ShapeError(f"separable attention: weight shapes {w_i.shape}, {w_k.shape}, {w_v.shape} vs dim {d}")
    cs = softmax(source @ w_i, axis=0)
    keys = source @ w_k
    cv = cs @ keys
    pre_v = target @ w_v
    vals, act_cache = activation_fwd(pre_v, act)
    if combine == "multiply":
        mixed = vals * cv
    elif combine == "add":
        mixed = vals + cv
    else:
        raise ConfigError(f"separable combine must be 'multiply' or 'add', got {combine!r}")
    out = mixed @ w_o
    cache = (target, source, w_i, w_k, w_v, w_o, cs, keys, cv, vals, act_cache, mixed, combine, act)
    return out, cache


def separable_attention_bwd(d_out, cache) -> dict:
    target, source, w_i, w_k, w_v, w_o, cs, keys, cv, vals, act_cache, mixed, combine, act = cache
    d_wo = mixed.T @ d_out
    d_mixed = d_out @ w_o.T
    if combine == "multiply":
        d_vals = d_mixed * cv
        d_cv = np.sum(d_mixed * vals, axis=0)
    else:
        d_vals = d_mixed
        d_cv = np.sum(d_mixed, axis=0)
    d_pre_v = activation_bwd(d_vals, act_cache, act)
    d_cs = keys @ d_cv
    d_keys = np.outer(cs, d_cv)
    d_scores = softmax_bwd(d_cs, cs, axis=0)
    return {
        "target": d_pre_v @ w_v.T,
        "source": np.outer(d_scores, w_i) + d_keys @ w_k.T,
        "w_i": source.T @ d_scores,
        "w_k": source.T @ d_keys,
        "w_v": target.T @ d_pre_v,
        "w_o": d_wo,
    }


def separable_self_attention(x, w_i, w_k, w_v, w_o=None, combine: str = "multiply", act: str = "silu") -> np.ndarray:
    """Linear-complexity self-attention over k tokens of width d.

    A single context vector replaces the k x k score matrix; it is broadcast
    against the value branch and passed through the output projection
    (identity when ``w_o`` is None).
    """
    x = np.asarray(x, dtype=np.float64)
    w_o = np.eye(np.asarray(w_v).shape[1]) if w_o is None else np.asarray(w_o, dtype=np.float64)
    out, _ = separable_attention_fwd(
        x, x, np.asarray(w_i, dtype=np.float64), np.asarray(w_k, dtype=np.float64),
        np.asarray(w_v, dtype=np.float64), w_o, combine, act,
    )
    return out


def separable_cross_hand_attention(left, right, weights: dict, combine: str = "multiply", act: str = "silu") -> CrossHandFeatures:
    """Cross-hand attention built from separable attention.

    For the right-to-left direction the right hand supplies context scores and
    keys (its ``i``/``k`` weights) and the left hand supplies values and the
    output projection (its ``v``/``o`` weights); symmetric for left-to-right.
    """
    left, right = _check_hands(left, right)
    w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    r2l, _ = separable_attention_fwd(left, right, w["right.i"], w["right.k"], w["left.v"], w["left.o"], combine, act)
    l2r, _ = separable_attention_fwd(right, left, w["left.i"], w["left.k"], w["right.v"], w["right.o"], combine, act)
    return CrossHandFeatures(left_to_right=l2r, right_to_left=r2l)


# ---------------------------------------------------------------------------
# Pointwise MLP merge
# ---------------------------------------------------------------------------


@dataclass
class PointwiseMLP:
    """Row-wise two-layer perceptron d -> hidden -> d."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    act: str = "silu"

    def forward(self, x):
        pre = x @ self.w1 + self.b1
        hidden, act_cache = activation_fwd(pre, self.act)
        return hidden @ self.w2 + self.b2, (x, hidden, act_cache)

    def backward(self, d_out, cache) -> dict:
        x, hidden, act_cache = cache
        d_hidden = d_out @ self.w2.T
        d_pre = activation_bwd(d_hidden, act_cache, self.act)
        return {
            "x": d_pre @ self.w1.T,
            "w1": x.T @ d_pre,
            "b1": d_pre.sum(axis=0),
            "w2": hidden.T @ d_out,
            "b2": d_out.sum(axis=0),
        }

    def __call__(self, x):
        return self.forward(np.asarray(x, dtype=np.float64))[0]


def merge_cross_features(own, incoming, mlp: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply ``mlp`` row-wise to ``own + incoming``."""
    own = np.asarray(own, dtype=np.float64)
    incoming = np.asarray(incoming, dtype=np.float64)
    if own.shape != incoming.shape:
        raise ShapeError(f"merge_cross_features: {own.shape} != {incoming.shape}")
    return np.asarray(mlp(own + incoming), dtype=np.float64)
