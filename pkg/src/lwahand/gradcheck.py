"""Finite-difference verification of every hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import (
    dense_attention_bwd,
    dense_attention_fwd,
    map_global_to_graph_bwd,
    PointwiseMLP,
    query_only_cross_attention_bwd,
    query_only_cross_attention_fwd,
    separable_attention_bwd,
    separable_attention_fwd,
)
from .config import FORMAT_VERSION, ModelConfig
from .losses import JointRegressor, joint_loss_grad, smooth_loss_grad, vertex_loss_grad
from .mesh import gcn_bwd, gcn_fwd, head_bwd, head_fwd
from .model import Model, pipeline_bwd, pipeline_fwd
from .numerics import NumericError, SeededRng, finite_diff_grad, relative_error, softmax

DEFAULT_TOL = 1e-4


@dataclass
class GroupResult:
    group: str
    rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    seed: int
    tolerance: float
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def worst(self) -> GroupResult:
        return max(self.groups, key=lambda g: g.rel_err)

    def record(self, group: str, err: float) -> None:
        self.groups.append(GroupResult(group, float(err), bool(err < self.tolerance)))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "groups": [{"group": g.group, "max_rel_err": g.rel_err, "passed": g.passed} for g in self.groups],
        }

    def table(self) -> str:
        width = max(len(g.group) for g in self.groups)
        lines = [f"{'group':<{width}}  {'max_rel_err':>12}  result"]
        lines += [f"{g.group:<{width}}  {g.rel_err:12.3e}  {'pass' if g.passed else 'FAIL'}" for g in self.groups]
        lines.append(f"{'all':<{width}}  {self.worst.rel_err:12.3e}  {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def richardson_directional(f: Callable[[float], float], h: float) -> float:
    """Fourth-order central estimate of d/dt f(t) at t = 0."""
    vals = [f(s * h) for s in (1.0, -1.0, 2.0, -2.0)]
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite objective during finite differencing")
    return (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h)


def _scalar_rel_err(a: float, n: float, floor: float = 1e-12) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_model(cfg: ModelConfig, seed: int = 0, tol: float = DEFAULT_TOL, eps: float = 1e-4,
                fault: Callable[[dict], None] | None = None, model: Model | None = None) -> GradcheckReport:
    """Directional check of every trainable parameter group of the full pipeline.

    The objective is a fixed random linear functional of both output meshes,
    which is smooth everywhere. ``fault`` may mutate the analytic gradient dict
    before comparison (fault-injection hook for tests).
    """
    model = model or Model.create(cfg, seed=seed)
    rng = SeededRng(10_000 + seed)
    image = rng.uniform((3, cfg.image_size, cfg.image_size))
    n_full = model.hierarchy.full_n
    r_left, r_right = rng.normal((n_full, 3)), rng.normal((n_full, 3))

    def objective() -> float:
        result, _ = pipeline_fwd(image, model)
        return float(np.sum(result.left.vertices * r_left) + np.sum(result.right.vertices * r_right))

    _, cache = pipeline_fwd(image, model)
    grads = pipeline_bwd(r_left, r_right, model, cache)
    if fault is not None:
        fault(grads)
    report = GradcheckReport(seed, tol)
    for name in model.params.names(trainable_only=True):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        base = model.params[name]
        direction = rng.normal(base.shape)

        def along(t, base=base, direction=direction, name=name):
            model.params[name] = base + t * direction
            return objective()

        try:
            numeric = richardson_directional(along, eps)
        finally:
            model.params[name] = base
        report.record(name, _scalar_rel_err(float(np.sum(g * direction)), numeric))
    return report


# ---------------------------------------------------------------------------
# Component checks: full finite-difference gradients of small instances
# ---------------------------------------------------------------------------


def _check_inputs(report: GradcheckReport, prefix: str, fwd: Callable[[dict], np.ndarray], inputs: dict,
                  analytic: dict, weight: np.ndarray, eps: float = 1e-6) -> None:
    for key in analytic:
        def f(x, key=key):
            return float(np.sum(fwd({**inputs, key: x}) * weight))

        report.record(f"{prefix}.{key}", relative_error(analytic[key], finite_diff_grad(f, inputs[key], eps)))


def check_components(seed: int = 0, tol: float = DEFAULT_TOL) -> GradcheckReport:
    """Losses, attention operators, GCN and mesh head against element-wise central differences."""
    rng = SeededRng(20_000 + seed)
    report = GradcheckReport(seed, tol)
    n = lambda *s: rng.normal(s)  # noqa: E731

    # losses: gradients w.r.t. predicted vertices
    pred, gt = 0.05 * n(20, 3), 0.05 * n(20, 3)
    report.record("loss.vertex", relative_error(vertex_loss_grad(pred, gt)[1],
                                                finite_diff_grad(lambda p: vertex_loss_grad(p, gt)[0], pred, 1e-8)))
    reg = JointRegressor(softmax(n(5, 20), axis=1))
    gj = 0.05 * n(5, 3)
    report.record("loss.joint", relative_error(joint_loss_grad(pred, gj, reg)[1],
                                               finite_diff_grad(lambda p: joint_loss_grad(p, gj, reg)[0], pred, 1e-8)))
    edges = np.array([(i, (i + 1) % 20) for i in range(20)] + [(i, (i + 3) % 20) for i in range(20)])
    report.record("loss.smooth", relative_error(smooth_loss_grad(pred, edges, gt)[1],
                                                finite_diff_grad(lambda p: smooth_loss_grad(p, edges, gt)[0], pred)))

    # query-only cross attention, both outputs
    heads = 2
    qa = {"local": n(7, 4), "tokens": n(3, 6), "w_q": n(heads, 3, 2), "w_o": 0.5 * n(4, 6)}
    r_u, r_a = n(3, 6), n(3, 7)

    def qa_fwd(x):
        (attn, update), _ = query_only_cross_attention_fwd(x["local"], x["tokens"], x["w_q"], x["w_o"], heads)
        return np.sum(update * r_u) + np.sum(attn * r_a)

    _, cache = query_only_cross_attention_fwd(qa["local"], qa["tokens"], qa["w_q"], qa["w_o"], heads)
    _check_inputs(report, "attention.query_only", qa_fwd, qa, query_only_cross_attention_bwd(r_u, r_a, cache),
                  np.array(1.0))

    # map_global_to_graph
    pool = {"attn": softmax(n(3, 7), axis=1), "local": n(7, 4)}
    r = n(3, 4)
    _check_inputs(report, "attention.map_global_to_graph", lambda x: x["attn"] @ x["local"], pool,
                  map_global_to_graph_bwd(r, pool["attn"], pool["local"]), r)

    # dense attention (one direction of cross-hand attention)
    da = {"target": n(5, 4), "source": n(6, 4), "w_q": n(4, 4), "w_k": n(4, 4), "w_v": n(4, 4)}
    r = n(5, 4)
    out_fwd = lambda x: dense_attention_fwd(x["target"], x["source"], x["w_q"], x["w_k"], x["w_v"])[0]  # noqa: E731
    _, cache = dense_attention_fwd(**da)
    _check_inputs(report, "attention.dense", out_fwd, da, dense_attention_bwd(r, cache), r)

    # separable attention, both combine modes
    for combine in ("multiply", "add"):
        sa = {"target": n(5, 4), "source": n(6, 4), "w_i": n(4), "w_k": n(4, 4), "w_v": n(4, 4), "w_o": n(4, 4)}
        r = n(5, 4)

        def sep_fwd(x, combine=combine):
            return separable_attention_fwd(x["target"], x["source"], x["w_i"], x["w_k"], x["w_v"], x["w_o"],
                                           combine)[0]

        _, cache = separable_attention_fwd(**sa, combine=combine)
        _check_inputs(report, f"attention.separable_{combine}", sep_fwd, sa, separable_attention_bwd(r, cache), r)

    # pointwise MLP merge
    mp = {"x": n(5, 4), "w1": n(4, 8), "b1": n(8), "w2": n(8, 4), "b2": n(4)}
    r = n(5, 4)
    mlp_fwd = lambda x: PointwiseMLP(x["w1"], x["b1"], x["w2"], x["b2"])(x["x"])  # noqa: E731
    mlp = PointwiseMLP(mp["w1"], mp["b1"], mp["w2"], mp["b2"])
    _, cache = mlp.forward(mp["x"])
    _check_inputs(report, "attention.pointwise_mlp", mlp_fwd, mp, mlp.backward(r, cache), r)

    # GCN layer on a ring
    m = 8
    a = np.eye(m) + np.roll(np.eye(m), 1, axis=1) + np.roll(np.eye(m), -1, axis=1)
    inv = 1.0 / np.sqrt(a.sum(axis=1))
    a_hat = a * inv[:, None] * inv[None, :]
    gc = {"x": n(m, 4), "w": n(4, 4)}
    r = n(m, 4)
    _, cache = gcn_fwd(gc["x"], a_hat, gc["w"])
    _check_inputs(report, "mesh.gcn", lambda x: gcn_fwd(x["x"], a_hat, x["w"])[0], gc, gcn_bwd(r, cache), r)

    # mesh head: mix @ (x @ proj) + bias
    hd = {"x": n(m, 4), "mix": softmax(n(12, m), axis=1), "proj": n(4, 3), "bias": n(12, 3)}
    r = n(12, 3)
    _, cache = head_fwd(**hd)
    _check_inputs(report, "mesh.head", lambda x: head_fwd(x["x"], x["mix"], x["proj"], x["bias"])[0], hd,
                  head_bwd(r, cache), r)
    return report
