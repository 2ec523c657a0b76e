"""Static multiply-add accounting for the whole pipeline.

Costs come from closed-form formulas registered per operator; nothing is
executed. One multiply-add counts as two FLOPs. Softmax and activations use
fixed per-element constants taken from the config.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import FORMAT_VERSION, ModelConfig
from .mesh import SubmeshHierarchy, resolve_topology


class FlopsError(ValueError):
    """Unregistered operator or malformed sweep."""


@dataclass(frozen=True)
class CostConstants:
    softmax: int = 5
    activation: int = 4


# ---------------------------------------------------------------------------
# Cost registry. Each formula returns {leaf name: flops}.
# ---------------------------------------------------------------------------

OP_COSTS: dict[str, Callable[..., dict[str, int]]] = {}


def register(*names: str):
    def deco(fn):
        for name in names:
            OP_COSTS[name] = fn
        return fn

    return deco


def op_cost(op: str, k: CostConstants, **shape) -> dict[str, int]:
    try:
        fn = OP_COSTS[op]
    except KeyError:
        raise FlopsError(f"no cost formula registered for op {op!r}") from None
    return fn(k, **shape)


@register("matmul")
def _matmul(k, m, inner, n):
    return {"matmul": 2 * m * inner * n}


@register("add")
def _add(k, n):
    return {"add": n}


@register("softmax")
def _softmax(k, n):
    return {"softmax": k.softmax * n}


@register("activation")
def _activation(k, n, kind="silu"):
    return {"act": 0 if kind == "identity" else k.activation * n}


@register("depthwise_conv2d")
def _depthwise(k, channels, out_h, out_w, kernel):
    return {"depthwise": 2 * channels * out_h * out_w * kernel * kernel}


@register("pointwise_conv2d")
def _pointwise(k, c_in, c_out, h, w):
    return {"pointwise": 2 * c_in * c_out * h * w}


@register("query_only_cross_attention")
def _query_only(k, pixels, channels, tokens, dim, heads, project_out=True):
    ch, dh = channels // heads, dim // heads
    out = {
        "query": heads * 2 * tokens * dh * ch,
        "scores": heads * 2 * tokens * ch * pixels,
        "softmax": heads * k.softmax * tokens * pixels,
        "head_mean": heads * tokens * pixels,
    }
    if project_out:
        out["context"] = heads * 2 * tokens * pixels * ch
        out["out_proj"] = 2 * tokens * channels * dim
    return out


@register("map_global_to_graph")
def _map_global(k, tokens, pixels, dim):
    return {"pool": 2 * tokens * pixels * dim, "summary": tokens * dim}


@register("dense_attention")
def _dense_attention(k, n_target, n_source, dim):
    return {
        "qkv": 2 * n_target * dim * dim + 2 * 2 * n_source * dim * dim,
        "scores": 2 * n_target * n_source * dim + n_target * n_source,
        "softmax": k.softmax * n_target * n_source,
        "weighted_sum": 2 * n_target * n_source * dim,
    }


@register("cross_hand_attention")
def _cross_hand(k, n, dim):
    one = _dense_attention(k, n, n, dim)
    return {f"{d}.{key}": v for d in ("r2l", "l2r") for key, v in one.items()}


@register("separable_attention")
def _separable(k, n_target, n_source, dim, kind="silu"):
    return {
        "scores": 2 * n_source * dim,
        "softmax": k.softmax * n_source,
        "keys": 2 * n_source * dim * dim,
        "context": 2 * n_source * dim,
        "values": 2 * n_target * dim * dim + _activation(k, n_target * dim, kind)["act"],
        "combine": n_target * dim,
        "out_proj": 2 * n_target * dim * dim,
    }


@register("separable_self_attention")
def _separable_self(k, n, dim, kind="silu"):
    return _separable(k, n, n, dim, kind)


@register("separable_cross_hand_attention")
def _separable_cross(k, n, dim, kind="silu"):
    one = _separable(k, n, n, dim, kind)
    return {f"{d}.{key}": v for d in ("r2l", "l2r") for key, v in one.items()}


@register("pointwise_mlp")
def _mlp(k, n, dim, hidden, kind="silu"):
    return {
        "fc1": 2 * n * dim * hidden + n * hidden,
        "act": _activation(k, n * hidden, kind)["act"],
        "fc2": 2 * n * hidden * dim + n * dim,
    }


@register("merge_cross_features")
def _merge(k, n, dim, hidden, kind="silu"):
    return {"residual": n * dim, **_mlp(k, n, dim, hidden, kind)}


@register("mobile_block", "mobile_block_forward")
def _mobile_block(k, c_in, c_out, expansion, kernel, stride, size, tokens, dim, heads, kind="silu"):
    c = c_in * expansion
    out = size // stride
    px = out * out
    costs = {}
    if expansion > 1:
        costs["expand"] = _pointwise(k, c_in, c, size, size)["pointwise"]
        costs["expand_act"] = _activation(k, c * size * size, kind)["act"]
    costs["depthwise"] = _depthwise(k, c, out, out, kernel)["depthwise"]
    costs["fuse"] = _pointwise(k, c, c, out, out)["pointwise"] + 2 * dim * c + c * px + tokens * dim
    costs["pointwise"] = _pointwise(k, c, c_out, out, out)["pointwise"]
    costs["act"] = _activation(k, c_out * px, kind)["act"]
    for key, v in _query_only(k, px, c_out, tokens, dim, heads).items():
        costs[f"token_attn.{key}"] = v
    costs["token_residual"] = tokens * dim
    return costs


@register("gcn", "gcn_block")
def _gcn(k, n, nnz, dim, kind="silu"):
    return {
        "aggregate": 2 * nnz * dim,
        "transform": 2 * n * dim * dim,
        "act": _activation(k, n * dim, kind)["act"],
    }


@register("upsample_level")
def _upsample(k, nnz, dim):
    return {"upsample": 2 * nnz * dim}


@register("upsample_to_full")
def _head(k, n_top, n_full, dim):
    return {
        "proj": 2 * n_top * dim * 3,
        "mix": 2 * n_full * n_top * 3,
        "bias": n_full * 3,
    }


@register("bridge_image")
def _bridge_image(k, pixels, channels, tokens, dim, heads):
    costs = {"proj_in": 2 * pixels * channels * dim}
    for key, v in _query_only(k, pixels, dim, tokens, dim, heads, project_out=False).items():
        costs[f"attn.{key}"] = v
    costs.update(_map_global(k, tokens, pixels, dim))
    return costs


@register("bridge_fusion")
def _bridge_fusion(k, n, dim):
    per_hand = 2 * n * dim * dim + n * dim
    return {"offset": 2 * 2 * dim * dim, "project": 2 * per_hand}


@register("bridge_forward")
def _bridge(k, pixels, channels, tokens, dim, heads, n, hidden, cross_mode="dense", kind="silu"):
    parts = {"image": _bridge_image(k, pixels, channels, tokens, dim, heads), "fusion": _bridge_fusion(k, n, dim)}
    if cross_mode == "dense":
        parts["cross"] = _cross_hand(k, n, dim)
    else:
        parts["cross"] = _separable_cross(k, n, dim, kind)
    for hand in ("left", "right"):
        parts[f"merge.{hand}"] = _merge(k, n, dim, hidden, kind)
    return {f"{p}.{leaf}": v for p, costs in parts.items() for leaf, v in costs.items()}


@register("aux_heatmap_head")
def _aux_heatmap(k, channels, size, joints):
    return {"heatmap": _pointwise(k, channels, 2 * joints, size, size)["pointwise"]}


@register("aux_segmentation_head")
def _aux_segmentation(k, channels, size):
    return {"segmentation": _pointwise(k, channels, 3, size, size)["pointwise"]}


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class FlopsReport:
    entries: list[dict] = field(default_factory=list)
    image_part: int = 0
    pose_part: int = 0
    convention: str = "1 multiply-add = 2 FLOPs"
    split_note: str = ("image part: encoder stacks plus each bridge's input projection, token attention map "
                       "and context pooling; pose part: fusion, cross-hand attention, merge MLP, GCN, "
                       "upsampling and mesh heads")

    @property
    def total(self) -> int:
        return self.image_part + self.pose_part

    def check(self) -> "FlopsReport":
        s = sum(e["flops"] for e in self.entries)
        if s != self.total:
            raise FlopsError(f"entries sum {s} != image {self.image_part} + pose {self.pose_part}")
        return self

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "convention": self.convention,
            "split": self.split_note,
            "entries": self.entries,
            "image_part": self.image_part,
            "pose_part": self.pose_part,
            "total": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def by_group(self, depth: int = 1) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            key = ".".join(e["path"].split(".")[:depth])
            out[key] = out.get(key, 0) + e["flops"]
        return out

    def table(self) -> str:
        g = 1e9
        lines = [
            f"# FLOPs ({self.convention})",
            f"{'Image part':>12} {'Pose part':>12} {'Total':>12}",
            f"{self.image_part / g:12.4f} {self.pose_part / g:12.4f} {self.total / g:12.4f}   GFLOPs",
            "",
            f"{'module':<28} {'part':<6} {'MFLOPs':>10}",
        ]
        for key, v in self.by_group(2).items():
            part = next(e["part"] for e in self.entries if e["path"].startswith(key + ".") or e["path"] == key)
            lines.append(f"{key:<28} {part:<6} {v / 1e6:10.3f}")
        return "\n".join(lines) + "\n"


class _Tally:
    def __init__(self, k: CostConstants):
        self.k = k
        self.report = FlopsReport()

    def add(self, part: str, prefix: str, op: str, **shape):
        for leaf, v in op_cost(op, self.k, **shape).items():
            v = int(v)
            self.report.entries.append({"path": f"{prefix}.{leaf}", "part": part, "flops": v})
            if part == "image":
                self.report.image_part += v
            else:
                self.report.pose_part += v


def count_flops(cfg: ModelConfig, hierarchy: SubmeshHierarchy | None = None) -> FlopsReport:
    """Closed-form FLOPs of one forward pass for ``cfg``; never runs the model."""
    h = resolve_topology(cfg.topology) if hierarchy is None else hierarchy
    enc, d, kind = cfg.encoder, cfg.encoder.dim, cfg.activation
    tally = _Tally(CostConstants(cfg.flops.softmax_per_element, cfg.flops.activation_per_element))
    tally.report.convention = cfg.flops.convention
    size, c_in, sizes = cfg.image_size, 3, []
    for i, st in enumerate(enc.stacks):
        tally.add("image", f"encoder.stack{i}", "mobile_block", c_in=c_in, c_out=st.out_channels,
                  expansion=st.expansion, kernel=st.kernel, stride=st.stride, size=size, tokens=enc.tokens,
                  dim=d, heads=enc.heads, kind=kind)
        size //= st.stride
        sizes.append(size)
        c_in = st.out_channels
    tally.add("image", "encoder.global", "add", n=enc.tokens * d)
    hidden = cfg.bridge.mlp_ratio * d
    for t, tap in enumerate(enc.taps):
        p = f"bridge{t}"
        s, c_t = sizes[tap - 1], enc.stacks[tap - 1].out_channels
        n = h.levels[t].n
        tally.add("image", f"{p}.image", "bridge_image", pixels=s * s, channels=c_t, tokens=enc.tokens, dim=d,
                  heads=cfg.bridge.heads)
        tally.add("pose", f"{p}.fusion", "bridge_fusion", n=n, dim=d)
        if cfg.cross_mode_at(t) == "dense":
            tally.add("pose", f"{p}.cross", "cross_hand_attention", n=n, dim=d)
        else:
            tally.add("pose", f"{p}.cross", "separable_cross_hand_attention", n=n, dim=d, kind=kind)
        for hand in ("left", "right"):
            tally.add("pose", f"{p}.merge.{hand}", "merge_cross_features", n=n, dim=d, hidden=hidden, kind=kind)
        for j in range(cfg.decoder.gcn_depth[t]):
            for hand in ("left", "right"):
                tally.add("pose", f"decoder.level{t}.gcn{j}.{hand}", "gcn", n=n, nnz=h.levels[t].nnz, dim=d,
                          kind=kind)
        if t < 2:
            nnz = int(np.count_nonzero(h.levels[t].upsample))
            for hand in ("left", "right"):
                tally.add("pose", f"decoder.level{t}.upsample.{hand}", "upsample_level", nnz=nnz, dim=d)
    for hand in ("left", "right"):
        tally.add("pose", f"head.{hand}", "upsample_to_full", n_top=h.levels[-1].n, n_full=h.full_n, dim=d)
    if cfg.flops.aux_heads:
        fine = enc.taps[2]
        s, c = sizes[fine - 1], enc.stacks[fine - 1].out_channels
        tally.add("image", "aux.heatmap", "aux_heatmap_head", channels=c, size=s, joints=cfg.eval.num_joints)
        tally.add("image", "aux.segmentation", "aux_segmentation_head", channels=c, size=s)
    return tally.report.check()


# ---------------------------------------------------------------------------
# Complexity scans
# ---------------------------------------------------------------------------


@dataclass
class ComplexityScan:
    op: str
    variable: str
    sizes: list[int]
    flops: list[int]
    exponent: float
    fixed: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "op": self.op, "variable": self.variable, "sizes": self.sizes,
                "flops": self.flops, "exponent": self.exponent, "fixed": self.fixed}


# ops whose cost can be swept over a sequence length, with the shape keyword to vary
SWEEPABLE = {
    "separable_self_attention": "n",
    "separable_cross_hand_attention": "n",
    "cross_hand_attention": "n",
    "dense_attention": ("n_target", "n_source"),
    "matmul": "n",
}


def fit_exponent(sizes, values) -> float:
    """Least-squares slope of log(values) against log(sizes)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def complexity_scan(op_name: str, sweep, dim: int = 4, constants: CostConstants | None = None,
                    **fixed) -> ComplexityScan:
    """Sweep the sequence length of ``op_name`` with feature width ``dim`` held fixed.

    A narrow fixed width keeps the projection terms, which grow linearly in the
    sequence length for every operator, from masking the score-matrix term.
    """
    sizes = [int(s) for s in sweep]
    if len(sizes) < 4:
        raise FlopsError(f"complexity scan needs at least 4 sizes, got {len(sizes)}")
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise FlopsError(f"complexity scan sizes must be positive and strictly increasing: {sizes}")
    if op_name not in SWEEPABLE:
        raise FlopsError(f"op {op_name!r} has no sweepable length; sweepable: {sorted(SWEEPABLE)}")
    k = constants or CostConstants()
    keys = SWEEPABLE[op_name]
    keys = (keys,) if isinstance(keys, str) else keys
    shape = dict(fixed)
    if op_name == "matmul":
        shape.setdefault("m", dim)
        shape.setdefault("inner", dim)
    else:
        shape.setdefault("dim", dim)
    flops = []
    for s in sizes:
        shape.update({key: s for key in keys})
        flops.append(sum(op_cost(op_name, k, **shape).values()))
    exponent = fit_exponent(sizes, flops)
    if not math.isfinite(exponent):
        raise FlopsError(f"non-finite exponent for {op_name}")
    fixed_out = {key: v for key, v in shape.items() if key not in keys}
    return ComplexityScan(op_name, "/".join(keys), sizes, flops, exponent, fixed_out)


def parse_sweep(text: str) -> list[int]:
    """'64..512' doubles from 64 to 512; '64,100,200,400' is an explicit list."""
    if ".." in text:
        lo, hi = (int(v) for v in text.split(".."))
        if lo < 1 or hi < lo:
            raise FlopsError(f"bad sweep range {text!r}")
        out = [lo]
        while out[-1] * 2 <= hi:
            out.append(out[-1] * 2)
        return out
    return [int(v) for v in text.split(",")]
