"""Bridge levels and the end-to-end two-hand pipeline.

Per level t the pipeline runs ``bridge_forward`` (image context pooled into
both hands' vertex features, then cross-hand attention and an MLP merge),
the shared GCN blocks, and the upsample to the next submesh level. After the
last level each hand has its own linear head to 778 x 3 coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .attention import (
    AttentionMap,
    PointwiseMLP,
    dense_attention_bwd,
    dense_attention_fwd,
    query_only_cross_attention_bwd,
    query_only_cross_attention_fwd,
    separable_attention_bwd,
    separable_attention_fwd,
)
from .config import ModelConfig
from .encoder import FeaturePyramid, encoder_bwd, encoder_fwd
from .mesh import HandMesh, HandVertexFeatures, SubmeshHierarchy, gcn_bwd, gcn_fwd, head_bwd, head_fwd, resolve_topology
from .numerics import ParamStore, SeededRng, ShapeError, accumulate

OPERATORS = ("bridge_forward",)

HANDS = ("left", "right")


class BridgeError(ShapeError):
    """Shape error raised inside a bridge, tagged with the level."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, hierarchy: SubmeshHierarchy, seed: int | None = None) -> ParamStore:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], in a fixed order."""
    rng = SeededRng(cfg.seed if seed is None else seed)
    ps = ParamStore()
    enc, d = cfg.encoder, cfg.encoder.dim

    def uni(name, shape, fan_in, scale=None):
        if scale is None:
            scale = cfg.init.attention_gain if _is_attention_param(name) else cfg.init.gain
        b = scale / np.sqrt(fan_in)
        ps.add(name, rng.uniform(shape, -b, b))

    uni("encoder.tokens", (enc.tokens, d), d)
    c_in = 3
    for i, st in enumerate(enc.stacks):
        p = f"encoder.stack{i}"
        c = c_in * st.expansion
        if st.expansion > 1:
            uni(f"{p}.expand", (c, c_in), c_in)
        uni(f"{p}.depthwise", (c, st.kernel, st.kernel), st.kernel**2)
        uni(f"{p}.fuse", (c, c + d), c + d)
        uni(f"{p}.pointwise", (st.out_channels, c), c)
        uni(f"{p}.attn_q", (enc.heads, d // enc.heads, st.out_channels // enc.heads), d // enc.heads)
        uni(f"{p}.attn_o", (st.out_channels, d), st.out_channels)
        c_in = st.out_channels
    br = cfg.bridge
    hidden = br.mlp_ratio * d
    for t, tap in enumerate(enc.taps):
        p = f"bridge{t}"
        c_t = enc.stacks[tap - 1].out_channels
        uni(f"{p}.proj_in", (c_t, d), c_t)
        if br.tokens == "per_level":
            uni(f"{p}.tokens", (enc.tokens, d), d)
        uni(f"{p}.attn_q", (br.heads, d // br.heads, d // br.heads), d // br.heads)
        uni(f"{p}.fuse", (2 * d, d), 2 * d)
        for hand in HANDS:
            if cfg.cross_mode_at(t) == "dense":
                for w in "qkv":
                    uni(f"{p}.cross.{hand}.{w}", (d, d), d)
            else:
                uni(f"{p}.cross.{hand}.i", (d,), d)
                for w in "kvo":
                    uni(f"{p}.cross.{hand}.{w}", (d, d), d)
        uni(f"{p}.merge.w1", (d, hidden), d)
        uni(f"{p}.merge.b1", (hidden,), d)
        uni(f"{p}.merge.w2", (hidden, d), hidden)
        uni(f"{p}.merge.b2", (d,), hidden)
    n0 = hierarchy.levels[0].n
    for hand in HANDS:
        uni(f"decoder.init.{hand}", (n0, d), d)
    for t, depth in enumerate(cfg.decoder.gcn_depth):
        for j in range(depth):
            uni(f"decoder.level{t}.gcn{j}", (d, d), d)
    top = hierarchy.levels[-1]
    for hand in HANDS:
        ps.add(f"head.{hand}.mix", top.upsample.copy())
        uni(f"head.{hand}.proj", (d, 3), d, scale=cfg.init.head_gain)
        ps.add(f"head.{hand}.bias", np.zeros((hierarchy.full_n, 3)))
    return ps


def _is_attention_param(name: str) -> bool:
    return "attn_q" in name or name.endswith((".tokens", ".q", ".k", ".i"))


def zero_params(ps: ParamStore) -> ParamStore:
    out = ps.copy()
    for name in out:
        out[name] = np.zeros_like(out[name])
    return out


@dataclass
class Model:
    cfg: ModelConfig
    hierarchy: SubmeshHierarchy
    params: ParamStore

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int | None = None, hierarchy: SubmeshHierarchy | None = None) -> "Model":
        h = resolve_topology(cfg.topology) if hierarchy is None else hierarchy
        return cls(cfg, h, init_params(cfg, h, seed))

    def save_weights(self, path) -> None:
        tensorio.save_bundle(path, [self.params[n] for n in self.params])

    def load_weights(self, path) -> None:
        arrays = tensorio.load_bundle(path)
        names = list(self.params)
        if len(arrays) != len(names):
            raise tensorio.FormatError(f"weights: {len(arrays)} tensors in file, model has {len(names)}")
        for name, arr in zip(names, arrays):
            if arr.shape != self.params[name].shape:
                raise tensorio.FormatError(f"weights: {name} has shape {arr.shape}, expected {self.params[name].shape}")
        for name, arr in zip(names, arrays):
            self.params[name] = arr


# ---------------------------------------------------------------------------
# Bridge
# ---------------------------------------------------------------------------


@dataclass
class BridgeLevel:
    """Weights of one bridge level, read out of a parameter store."""

    level: int
    n_vertices: int
    heads: int
    proj_in: np.ndarray
    attn_q: np.ndarray
    fuse: np.ndarray
    cross: dict
    mlp: PointwiseMLP
    cross_mode: str = "dense"
    attention_norm: str = "sqrt_d"
    combine: str = "multiply"
    act: str = "silu"

    @classmethod
    def from_params(cls, params: ParamStore, cfg: ModelConfig, hierarchy: SubmeshHierarchy, t: int) -> "BridgeLevel":
        p = f"bridge{t}"
        cross = {k[len(p) + 7 :]: params[k] for k in params if k.startswith(f"{p}.cross.")}
        mlp = PointwiseMLP(params[f"{p}.merge.w1"], params[f"{p}.merge.b1"], params[f"{p}.merge.w2"],
                           params[f"{p}.merge.b2"], cfg.activation)
        return cls(t, hierarchy.levels[t].n, cfg.bridge.heads, params[f"{p}.proj_in"], params[f"{p}.attn_q"],
                   params[f"{p}.fuse"], cross, mlp, cfg.cross_mode_at(t), cfg.bridge.attention_norm,
                   cfg.bridge.separable_combine, cfg.activation)


@dataclass
class BridgeOutput:
    left: np.ndarray
    right: np.ndarray
    attention: AttentionMap
    context: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _cross_fwd(target, source, lv: BridgeLevel, tgt: str, src: str):
    w = lv.cross
    if lv.cross_mode == "dense":
        return dense_attention_fwd(target, source, w[f"{tgt}.q"], w[f"{src}.k"], w[f"{src}.v"], lv.attention_norm)
    return separable_attention_fwd(target, source, w[f"{src}.i"], w[f"{src}.k"], w[f"{tgt}.v"], w[f"{tgt}.o"],
                                   lv.combine, lv.act)


def _cross_bwd(d_out, cache, lv: BridgeLevel, tgt: str, src: str):
    if lv.cross_mode == "dense":
        g = dense_attention_bwd(d_out, cache)
        wg = {f"{tgt}.q": g["w_q"], f"{src}.k": g["w_k"], f"{src}.v": g["w_v"]}
    else:
        g = separable_attention_bwd(d_out, cache)
        wg = {f"{src}.i": g["w_i"], f"{src}.k": g["w_k"], f"{tgt}.v": g["w_v"], f"{tgt}.o": g["w_o"]}
    return g["target"], g["source"], wg


def bridge_fwd(y, tokens, left, right, lv: BridgeLevel):
    y = np.asarray(y, dtype=np.float64)
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    try:
        if left.shape != right.shape or left.shape[0] != lv.n_vertices:
            raise ShapeError(f"vertex features {left.shape}/{right.shape} vs level size {lv.n_vertices}")
        c, h, w = y.shape
        d = lv.proj_in.shape[1]
        if lv.proj_in.shape[0] != c:
            raise ShapeError(f"image features have {c} channels, projection expects {lv.proj_in.shape[0]}")
        flat = y.reshape(c, h * w).T
        feats = flat @ lv.proj_in
        # one-way bridge: only the attention map is used, tokens are not updated
        (attn, _), qcache = query_only_cross_attention_fwd(feats, tokens, lv.attn_q, np.eye(d), lv.heads)
        context = attn @ feats
        summary = context.mean(axis=0)
        offset = summary @ lv.fuse[d:]
        fused = {"left": left @ lv.fuse[:d] + offset, "right": right @ lv.fuse[:d] + offset}
        r2l, c_r2l = _cross_fwd(fused["left"], fused["right"], lv, "left", "right")
        l2r, c_l2r = _cross_fwd(fused["right"], fused["left"], lv, "right", "left")
        out_l, m_l = lv.mlp.forward(fused["left"] + r2l)
        out_r, m_r = lv.mlp.forward(fused["right"] + l2r)
    except ShapeError as exc:
        raise BridgeError(f"bridge level {lv.level}: {exc}") from exc
    cache = dict(flat=flat, feats=feats, qcache=qcache, attn=attn, context=context, left=left, right=right,
                 c_r2l=c_r2l, c_l2r=c_l2r, m_l=m_l, m_r=m_r, m=tokens.shape[0])
    out = BridgeOutput(out_l, out_r, AttentionMap(attn), context,
                       {"attention_row_sum_max_dev": float(np.max(np.abs(attn.sum(axis=1) - 1.0)))})
    return out, cache


def bridge_bwd(d_left, d_right, lv: BridgeLevel, cache):
    """Returns (d_y, d_tokens, d_left, d_right, weight grads keyed by short name)."""
    d = lv.proj_in.shape[1]
    g = {}
    gl = lv.mlp.backward(d_left, cache["m_l"])
    gr = lv.mlp.backward(d_right, cache["m_r"])
    for k in ("w1", "b1", "w2", "b2"):
        g[f"merge.{k}"] = gl[k] + gr[k]
    d_fused = {"left": gl["x"].copy(), "right": gr["x"].copy()}
    cross_g = {}
    for tgt, src, key in (("left", "right", "c_r2l"), ("right", "left", "c_l2r")):
        d_out = gl["x"] if tgt == "left" else gr["x"]
        d_t, d_s, wg = _cross_bwd(d_out, cache[key], lv, tgt, src)
        d_fused[tgt] += d_t
        d_fused[src] += d_s
        for k, v in wg.items():
            accumulate(cross_g, k, v)
    for k, v in cross_g.items():
        g[f"cross.{k}"] = v
    d_offset = d_fused["left"].sum(axis=0) + d_fused["right"].sum(axis=0)
    summary = cache["context"].mean(axis=0)
    g["fuse"] = np.concatenate([cache["left"].T @ d_fused["left"] + cache["right"].T @ d_fused["right"],
                                np.outer(summary, d_offset)], axis=0)
    d_left_in = d_fused["left"] @ lv.fuse[:d].T
    d_right_in = d_fused["right"] @ lv.fuse[:d].T
    d_summary = lv.fuse[d:] @ d_offset
    d_context = np.broadcast_to(d_summary / cache["m"], cache["context"].shape)
    d_attn = d_context @ cache["feats"].T
    d_feats = cache["attn"].T @ d_context
    q = query_only_cross_attention_bwd(None, d_attn, cache["qcache"])
    d_feats = d_feats + q["local"]
    g["attn_q"] = q["w_q"]
    g["proj_in"] = cache["flat"].T @ d_feats
    d_flat = d_feats @ lv.proj_in.T
    return d_flat, q["tokens"], d_left_in, d_right_in, g


def bridge_forward(y, tokens, left: HandVertexFeatures, right: HandVertexFeatures, level: BridgeLevel) -> BridgeOutput:
    """Pool image context into both hands, then cross-hand attention and merge."""
    if left.level != level.level or right.level != level.level:
        raise BridgeError(f"bridge level {level.level}: vertex features at levels {left.level}/{right.level}")
    z = tokens.z if hasattr(tokens, "z") else np.asarray(tokens, dtype=np.float64)
    return bridge_fwd(y, z, left.features, right.features, level)[0]


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    left: HandMesh
    right: HandMesh
    pyramid: FeaturePyramid
    bridges: list[BridgeOutput]
    level_counts: list[int]

    def diagnostics(self) -> dict:
        devs = [b.diagnostics["attention_row_sum_max_dev"] for b in self.bridges]
        enc_dev = max(float(np.max(np.abs(a.sum(axis=1) - 1.0))) for a in self.pyramid.attention)
        return {
            "level_counts": self.level_counts,
            "bridge_attention_row_sum_max_dev": devs,
            "encoder_attention_row_sum_max_dev": enc_dev,
            "output_bounds": {
                h: {"min": float(m.vertices.min()), "max": float(m.vertices.max())}
                for h, m in (("left", self.left), ("right", self.right))
            },
        }


def _bridge_tokens(model: Model, pyramid: FeaturePyramid, t: int) -> np.ndarray:
    if model.cfg.bridge.tokens == "per_level":
        return model.params[f"bridge{t}.tokens"]
    return pyramid.tokens.snapshots[model.cfg.encoder.taps[t]]


def check_structure(model: Model) -> None:
    """Config/topology compatibility, checked before any compute."""
    h, cfg = model.hierarchy, model.cfg
    if len(h.levels) != 3:
        raise ShapeError(f"pipeline: topology has {len(h.levels)} levels, expected 3")
    n0 = h.levels[0].n
    if model.params["decoder.init.left"].shape != (n0, cfg.encoder.dim):
        raise ShapeError(f"pipeline: initial vertex features do not match level-0 size {n0}")
    if model.params["head.left.mix"].shape != (h.full_n, h.levels[-1].n):
        raise ShapeError("pipeline: head mix does not match topology")


def pipeline_fwd(image, model: Model):
    check_structure(model)
    cfg, ps, h = model.cfg, model.params, model.hierarchy
    pyramid, enc_cache = encoder_fwd(image, ps, cfg)
    feats = {hand: ps[f"decoder.init.{hand}"] for hand in HANDS}
    counts = [feats["left"].shape[0]]
    bridges, caches = [], []
    for t in range(3):
        lv = BridgeLevel.from_params(ps, cfg, h, t)
        out, bcache = bridge_fwd(pyramid.levels[t], _bridge_tokens(model, pyramid, t), feats["left"], feats["right"], lv)
        bridges.append(out)
        feats = {"left": out.left, "right": out.right}
        gcaches = []
        a_hat = h.levels[t].normalized_adjacency
        for j in range(cfg.decoder.gcn_depth[t]):
            w = ps[f"decoder.level{t}.gcn{j}"]
            step = {}
            for hand in HANDS:
                feats[hand], step[hand] = gcn_fwd(feats[hand], a_hat, w, cfg.activation)
            gcaches.append(step)
        if t < 2:
            up = h.levels[t].upsample
            feats = {hand: up @ feats[hand] for hand in HANDS}
            counts.append(feats["left"].shape[0])
        caches.append((lv, bcache, gcaches))
    meshes, hcaches = {}, {}
    for hand in HANDS:
        verts, hcaches[hand] = head_fwd(feats[hand], ps[f"head.{hand}.mix"], ps[f"head.{hand}.proj"],
                                        ps[f"head.{hand}.bias"])
        meshes[hand] = HandMesh(verts, hand)
    counts.append(meshes["left"].vertices.shape[0])
    expected = [*h.counts, h.full_n]
    if counts != expected or meshes["right"].vertices.shape != (h.full_n, 3):
        raise ShapeError(f"pipeline: level counts {counts} != {expected}")
    result = PipelineResult(meshes["left"], meshes["right"], pyramid, bridges, counts)
    return result, {"enc": enc_cache, "levels": caches, "heads": hcaches}


def pipeline_bwd(d_left, d_right, model: Model, cache) -> dict:
    """Gradients of a scalar objective w.r.t. every parameter, given mesh gradients."""
    cfg, ps, h = model.cfg, model.params, model.hierarchy
    grads: dict = {}
    d_feats = {}
    for hand, dv in (("left", d_left), ("right", d_right)):
        g = head_bwd(dv, cache["heads"][hand])
        d_feats[hand] = g["x"]
        for k in ("mix", "proj", "bias"):
            grads[f"head.{hand}.{k}"] = g[k]
    d_levels = [None, None, None]
    d_snapshots: dict = {}
    for t in range(2, -1, -1):
        lv, bcache, gcaches = cache["levels"][t]
        if t < 2:
            up = h.levels[t].upsample
            d_feats = {hand: up.T @ d_feats[hand] for hand in HANDS}
        for j in range(len(gcaches) - 1, -1, -1):
            name = f"decoder.level{t}.gcn{j}"
            for hand in HANDS:
                g = gcn_bwd(d_feats[hand], gcaches[j][hand])
                d_feats[hand] = g["x"]
                accumulate(grads, name, g["w"])
        d_flat, d_tok, d_l, d_r, g = bridge_bwd(d_feats["left"], d_feats["right"], lv, bcache)
        for k, v in g.items():
            accumulate(grads, f"bridge{t}.{k}", v)
        c, hh, ww = cache["enc"]["caches"][cfg.encoder.taps[t] - 1][1]["shape"]
        d_levels[t] = d_flat.T.reshape(c, hh, ww)
        if cfg.bridge.tokens == "per_level":
            accumulate(grads, f"bridge{t}.tokens", d_tok)
        else:
            idx = cfg.encoder.taps[t]
            d_snapshots[idx] = d_snapshots.get(idx, 0) + d_tok
        d_feats = {"left": d_l, "right": d_r}
    for hand in HANDS:
        grads[f"decoder.init.{hand}"] = d_feats[hand]
    encoder_bwd(d_levels, d_snapshots, None, cfg, cache["enc"], grads)
    for name in ps:
        if name not in grads:
            grads[name] = np.zeros_like(ps[name])
    return grads


def pipeline_forward(image, model: Model) -> tuple[HandMesh, HandMesh]:
    """Image (3 x S x S) to (left, right) meshes of 778 x 3 vertices."""
    result, _ = pipeline_fwd(image, model)
    return result.left, result.right
