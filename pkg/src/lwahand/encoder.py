"""Stacked mobile encoder: depthwise/pointwise local blocks fused with a small
set of global tokens, emitting a three-level feature pyramid.

Each stack computes::

    e   = act(expand(x))            # only when expansion > 1
    f0  = Fuse[depthwise(e), mean(Z)]   # concat token summary on channels, 1x1 project
    f1  = act(pointwise(f0))
    Z  <- Z + QueryOnlyCrossAttention(f1, Z)

The token-summary half of the fusion projection is constant over pixels, so it
is applied once as a per-channel offset instead of being broadcast first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import query_only_cross_attention_bwd, query_only_cross_attention_fwd
from .config import ModelConfig
from .numerics import (
    ParamStore,
    ShapeError,
    accumulate,
    activation_bwd,
    activation_fwd,
    depthwise_conv2d_bwd,
    depthwise_conv2d_fwd,
    pointwise_conv2d_bwd,
    pointwise_conv2d_fwd,
)

OPERATORS = ("mobile_block_forward",)


@dataclass
class EncoderStack:
    index: int
    depthwise: np.ndarray
    pointwise: np.ndarray
    fuse: np.ndarray
    attn_q: np.ndarray
    attn_o: np.ndarray
    stride: int = 1
    expand: np.ndarray | None = None

    @property
    def expansion(self) -> int:
        return 1 if self.expand is None else self.expand.shape[0] // self.expand.shape[1]

    @classmethod
    def from_params(cls, params: ParamStore, index: int, stride: int) -> "EncoderStack":
        p = f"encoder.stack{index}"
        return cls(
            index=index,
            depthwise=params[f"{p}.depthwise"],
            pointwise=params[f"{p}.pointwise"],
            fuse=params[f"{p}.fuse"],
            attn_q=params[f"{p}.attn_q"],
            attn_o=params[f"{p}.attn_o"],
            stride=stride,
            expand=params[f"{p}.expand"] if f"{p}.expand" in params else None,
        )


@dataclass
class TokenSet:
    z: np.ndarray
    snapshots: list[np.ndarray] = field(default_factory=list)


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray]
    global_vector: np.ndarray
    tokens: TokenSet
    # attention maps of every stack's token update, for diagnostics
    attention: list[np.ndarray] = field(default_factory=list)


def mobile_block_fwd(x, tokens, stack: EncoderStack, heads: int, act: str = "silu"):
    x = np.asarray(x, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.float64)
    cache = {}
    if stack.expand is not None:
        pre_e, cache["expand"] = pointwise_conv2d_fwd(x, stack.expand)
        e, cache["expand_act"] = activation_fwd(pre_e, act)
    else:
        e = x
    c = e.shape[0]
    if stack.fuse.shape != (c, c + tokens.shape[1]):
        raise ShapeError(f"stack{stack.index}: fuse {stack.fuse.shape} != {(c, c + tokens.shape[1])}")
    k = stack.depthwise.shape[-1]
    dw, cache["dw"] = depthwise_conv2d_fwd(e, stack.depthwise, stack.stride, k // 2)
    zbar = tokens.mean(axis=0)
    fx, cache["fuse"] = pointwise_conv2d_fwd(dw, stack.fuse[:, :c])
    fx = fx + (stack.fuse[:, c:] @ zbar)[:, None, None]
    pre, cache["pw"] = pointwise_conv2d_fwd(fx, stack.pointwise)
    out, cache["act"] = activation_fwd(pre, act)
    cout, h, w = out.shape
    local = out.reshape(cout, h * w).T
    (attn, update), cache["qca"] = query_only_cross_attention_fwd(local, tokens, stack.attn_q, stack.attn_o, heads)
    cache.update(zbar=zbar, c=c, m=tokens.shape[0], shape=out.shape, act_kind=act)
    return out, tokens + update, attn, cache


def mobile_block_bwd(d_out, d_tokens_new, stack: EncoderStack, cache) -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns (d_x, d_tokens_in, weight grads keyed by short name)."""
    act = cache["act_kind"]
    cout, h, w = cache["shape"]
    grads = {}
    d_out = np.zeros(cache["shape"]) if d_out is None else d_out
    q = query_only_cross_attention_bwd(d_tokens_new, None, cache["qca"])
    grads["attn_q"], grads["attn_o"] = q["w_q"], q["w_o"]
    d_tokens = d_tokens_new + q["tokens"]
    d_out = d_out + q["local"].T.reshape(cout, h, w)
    d_pre = activation_bwd(d_out, cache["act"], act)
    d_fx, grads["pointwise"] = pointwise_conv2d_bwd(d_pre, cache["pw"])
    c = cache["c"]
    d_dw, d_fuse_x = pointwise_conv2d_bwd(d_fx, cache["fuse"])
    s = d_fx.sum(axis=(1, 2))
    grads["fuse"] = np.concatenate([d_fuse_x, np.outer(s, cache["zbar"])], axis=1)
    d_tokens = d_tokens + (stack.fuse[:, c:].T @ s)[None, :] / cache["m"]
    d_e, grads["depthwise"] = depthwise_conv2d_bwd(d_dw, cache["dw"])
    if stack.expand is not None:
        d_pre_e = activation_bwd(d_e, cache["expand_act"], act)
        d_x, grads["expand"] = pointwise_conv2d_bwd(d_pre_e, cache["expand"])
    else:
        d_x = d_e
    return d_x, d_tokens, grads


def mobile_block_forward(x_prev, tokens: TokenSet, stack: EncoderStack, heads: int = 2, act: str = "silu"):
    """One encoder stack; returns (local features, updated TokenSet)."""
    out, z, _, _ = mobile_block_fwd(x_prev, tokens.z, stack, heads, act)
    return out, TokenSet(z, [*tokens.snapshots, z])


def encoder_fwd(image, params: ParamStore, cfg: ModelConfig, tokens=None):
    image = np.asarray(image, dtype=np.float64)
    enc = cfg.encoder
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"encoder: image must be 3 x H x W, got {image.shape}")
    if image.shape[1] != image.shape[2] or image.shape[1] != cfg.image_size:
        raise ShapeError(f"encoder: image {image.shape[1:]} != configured {cfg.image_size}")
    z = params["encoder.tokens"] if tokens is None else np.asarray(tokens, dtype=np.float64)
    snapshots = [z]
    outputs, caches, maps = [], [], []
    x = image
    for i, st in enumerate(enc.stacks):
        stack = EncoderStack.from_params(params, i, st.stride)
        x, z, attn, cache = mobile_block_fwd(x, z, stack, enc.heads, cfg.activation)
        outputs.append(x)
        snapshots.append(z)
        caches.append((stack, cache))
        maps.append(attn)
    levels = [outputs[t - 1] for t in enc.taps]
    pyramid = FeaturePyramid(levels, z.mean(axis=0), TokenSet(z, snapshots), maps)
    return pyramid, {"caches": caches, "m": z.shape[0]}


def encoder_bwd(d_levels, d_snapshots: dict, d_global, cfg: ModelConfig, cache, grads: dict) -> np.ndarray:
    """Backpropagate pyramid/token gradients; accumulates into ``grads``.

    ``d_snapshots`` maps snapshot index (0 = initial tokens, i = after stack i)
    to a token gradient. Returns the gradient w.r.t. the input image.
    """
    enc = cfg.encoder
    n = len(enc.stacks)
    d_feat = {}
    for t, tap in enumerate(enc.taps):
        if d_levels[t] is not None:
            d_feat[tap - 1] = d_feat.get(tap - 1, 0) + d_levels[t]
    last_stack, last_cache = cache["caches"][-1]
    d_z = np.zeros((cache["m"], last_stack.attn_o.shape[1]))
    if d_global is not None:
        d_z = d_z + np.broadcast_to(d_global / cache["m"], d_z.shape)
    d_z = d_z + d_snapshots.get(n, 0)
    d_x = None
    for i in range(n - 1, -1, -1):
        stack, c = cache["caches"][i]
        d_out = d_feat.get(i)
        if d_x is not None:
            d_out = d_x if d_out is None else d_out + d_x
        d_x, d_z, g = mobile_block_bwd(d_out, d_z, stack, c)
        for k, v in g.items():
            accumulate(grads, f"encoder.stack{i}.{k}", v)
        d_z = d_z + d_snapshots.get(i, 0)
    accumulate(grads, "encoder.tokens", d_z)
    return d_x


def encoder_forward(image, params: ParamStore, cfg: ModelConfig, tokens=None) -> FeaturePyramid:
    """Run every stack and tap Y_0 (coarsest) .. Y_2 (finest); F_G is the token mean."""
    return encoder_fwd(image, params, cfg, tokens)[0]
