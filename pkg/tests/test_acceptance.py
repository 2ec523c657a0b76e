"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the summary."""

import time

import numpy as np

import oracles
from lwahand.attention import (
    MultiHeadConfig,
    cross_hand_attention,
    PointwiseMLP,
    map_global_to_graph,
    merge_cross_features,
    query_only_cross_attention,
    separable_cross_hand_attention,
    separable_self_attention,
)
from lwahand.cli import main
from lwahand.config import default_config, toy_config
from lwahand.flops import complexity_scan, count_flops
from lwahand.gradcheck import check_components, check_model
from lwahand.losses import EvalProtocol, evaluate
from lwahand.mesh import HandMesh
from lwahand.model import Model, pipeline_fwd


def test_flops_total(hierarchy, criterion):
    t0 = time.perf_counter()
    rep = count_flops(default_config(), hierarchy)
    dt = time.perf_counter() - t0
    ok = 0.40e9 <= rep.total <= 0.55e9 and rep.image_part + rep.pose_part == rep.total and dt < 1.0
    criterion("flops total in [0.40, 0.55] GFLOPs, image + pose == total, < 1 s", ok,
              f"image {rep.image_part / 1e9:.4f} + pose {rep.pose_part / 1e9:.4f} = {rep.total / 1e9:.4f} "
              f"GFLOPs in {dt:.3f} s")


def test_complexity_exponents(criterion):
    sizes = [64, 128, 256, 512]
    t0 = time.perf_counter()
    sep = complexity_scan("separable_self_attention", sizes).exponent
    dense = complexity_scan("cross_hand_attention", sizes).exponent
    dt = time.perf_counter() - t0
    criterion("complexity exponents: separable in [0.9, 1.1], dense cross-hand in [1.9, 2.1], < 1 s",
              0.9 <= sep <= 1.1 and 1.9 <= dense <= 2.1 and dt < 1.0,
              f"separable {sep:.4f}, dense {dense:.4f}, {dt:.3f} s")


def _oracle_case(op, rng):
    heads = int(rng.choice([1, 2]))
    d = heads * int(rng.integers(1, 4))
    if op == "query_only_cross_attention":
        c, p, m = heads * int(rng.integers(1, 4)), int(rng.integers(1, 12)), int(rng.integers(1, 7))
        local, tokens = rng.normal(size=(p, c)), rng.normal(size=(m, d))
        w_q, w_o = rng.normal(size=(heads, d // heads, c // heads)), rng.normal(size=(c, d))
        attn, update = query_only_cross_attention(local, tokens, MultiHeadConfig(heads, d, m), w_q, w_o)
        return (attn.weights, update), oracles.query_only(local, tokens, w_q, w_o, heads)
    if op == "map_global_to_graph":
        m, p = int(rng.integers(1, 7)), int(rng.integers(1, 12))
        attn = rng.uniform(size=(m, p))
        attn /= attn.sum(axis=1, keepdims=True)
        local = rng.normal(size=(p, d))
        return (map_global_to_graph(attn, local),), (oracles.pool(attn, local),)
    n = int(rng.integers(1, 10))
    if op == "merge_cross_features":
        own, inc = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        hidden = int(rng.integers(1, 9))
        ws = rng.normal(size=(d, hidden)), rng.normal(size=hidden), rng.normal(size=(hidden, d)), rng.normal(size=d)
        return (merge_cross_features(own, inc, PointwiseMLP(*ws)),), (oracles.mlp_merge(own, inc, *ws),)
    left, right = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    if op == "cross_hand_attention":
        w = {f"{h}.{k}": rng.normal(size=(d, d)) for h in ("left", "right") for k in "qkv"}
        out = cross_hand_attention(left, right, w)
        return (out.left_to_right, out.right_to_left), oracles.cross_hand(left, right, w)
    if op == "separable_self_attention":
        w_i, w_k, w_v, w_o = rng.normal(size=d), rng.normal(size=(d, d)), rng.normal(size=(d, d)), rng.normal(size=(d, d))
        return (separable_self_attention(left, w_i, w_k, w_v, w_o),), (oracles.separable(left, left, w_i, w_k, w_v, w_o)[0],)
    w = {f"{h}.{k}": rng.normal(size=(d,) if k == "i" else (d, d)) for h in ("left", "right") for k in "ikvo"}
    out = separable_cross_hand_attention(left, right, w)
    r2l = oracles.separable(left, right, w["right.i"], w["right.k"], w["left.v"], w["left.o"])[0]
    l2r = oracles.separable(right, left, w["left.i"], w["left.k"], w["right.v"], w["right.o"])[0]
    return (out.left_to_right, out.right_to_left), (l2r, r2l)


def test_attention_oracles(criterion):
    ops = ["query_only_cross_attention", "map_global_to_graph", "cross_hand_attention", "merge_cross_features",
           "separable_self_attention", "separable_cross_hand_attention"]
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for op in ops:
        for seed in range(20):
            got, ref = _oracle_case(op, np.random.default_rng(1000 * ops.index(op) + seed))
            worst = max(worst, *(float(np.max(np.abs(np.asarray(g) - r))) for g, r in zip(got, ref)))
            cases += 1
    dt = time.perf_counter() - t0
    criterion("attention operators (five, plus separable cross-hand) match loop oracles to 1e-10, "
              ">= 20 shapes each, < 30 s",
              worst < 1e-10 and dt < 30.0, f"{cases} cases, max abs diff {worst:.2e}, {dt:.2f} s")


def test_gradient_suite(hierarchy, criterion):
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for seed in range(10):
        model = Model.create(toy_config(), seed=seed, hierarchy=hierarchy)
        for rep in (check_model(model.cfg, seed=seed, model=model), check_components(seed)):
            worst = max(worst, rep.worst.rel_err)
            failed += [f"{seed}:{g.group}" for g in rep.groups if not g.passed]
    dt = time.perf_counter() - t0
    criterion("gradients (losses, attention, GCN, heads, full model) rel err < 1e-4 over 10 seeds, < 5 min",
              not failed and dt < 300.0, f"worst {worst:.2e}, failures {failed[:3]}, {dt:.1f} s")


def test_pipeline_shapes(hierarchy, criterion):
    counts = set()
    shapes_ok = True
    for seed in range(5):
        model = Model.create(toy_config(), seed=seed, hierarchy=hierarchy)
        image = np.random.default_rng(seed).uniform(size=(3, 16, 16))
        result, _ = pipeline_fwd(image, model)
        counts.add(tuple(result.level_counts))
        shapes_ok &= result.left.vertices.shape == result.right.vertices.shape == (778, 3)
    big = Model.create(default_config(), hierarchy=hierarchy)
    result, _ = pipeline_fwd(np.random.default_rng(9).uniform(size=(3, 256, 256)), big)
    counts.add(tuple(result.level_counts))
    shapes_ok &= result.left.vertices.shape == result.right.vertices.shape == (778, 3)
    criterion("pipeline gives two 778x3 meshes through 63 -> 126 -> 252",
              shapes_ok and counts == {(63, 126, 252, 778)}, f"level counts {sorted(counts)}")


def test_evaluate_invariance(regressor, criterion):
    rng = np.random.default_rng(5)
    protocol = EvalProtocol()
    worst = 0.0
    for _ in range(10):
        gt = [HandMesh(0.05 * rng.normal(size=(778, 3))) for _ in range(2)]
        shift = rng.normal(size=3)
        moved = [HandMesh(m.vertices + shift) for m in gt]
        scaled = [HandMesh(rng.uniform(0.3, 3.0) * m.vertices) for m in gt]
        for pred, ref in ((moved, moved), (scaled, gt)):
            res = evaluate(pred, ref, protocol, regressor)
            worst = max(worst, res["mpjpe_mm"], res["mpvpe_mm"])
    criterion("evaluate is (0, 0) within 1e-9 under translating pred and gt, and scaling pred",
              worst < 1e-9, f"max error {worst:.2e} mm")


def _overfit(tmp_path, name, samples):
    out = tmp_path / name
    t0 = time.perf_counter()
    code = main(["overfit", "--samples", str(samples), "--steps", "500", "--format", "json", "--out", str(out)])
    return code, (out / "overfit.json").read_bytes(), time.perf_counter() - t0


def test_overfit(tmp_path, criterion):
    import json

    results = {}
    for samples in (1, 8):
        code, raw, dt = _overfit(tmp_path, f"n{samples}", samples)
        results[samples] = (code, json.loads(raw), dt)
    _, raw_again, _ = _overfit(tmp_path, "n1_again", 1)
    deterministic = raw_again == (tmp_path / "n1" / "overfit.json").read_bytes()
    ok = deterministic and all(c == 0 and r["ratio"] < 0.1 and r["steps"] <= 500 and dt < 300.0
                               for c, r, dt in results.values())
    detail = ", ".join(f"{n} samples ratio {r['ratio']:.4f} in {dt:.1f} s" for n, (_, r, dt) in results.items())
    criterion("overfit on 1-8 samples reaches < 10% of initial loss in <= 500 steps, deterministic, < 5 min",
              ok, f"{detail}, rerun identical {deterministic}")


def test_byte_identical_outputs(tmp_path, criterion):
    image = tmp_path / "img.lwat"
    from lwahand import tensorio

    tensorio.save(image, np.random.default_rng(3).uniform(size=(3, 256, 256)))
    files = {"forward": ["mesh_left.lwat", "mesh_right.lwat", "forward.json"],
             "report": ["flops.json", "flops.txt", "flops_breakdown.png", "complexity.png", "overfit.json",
                        "loss_trace.png", "report.txt"]}
    same = True
    for run in ("a", "b"):
        assert main(["forward", "--image", str(image), "--out", str(tmp_path / run / "forward")]) == 0
        assert main(["report", "--overfit-steps", "20", "--out", str(tmp_path / run / "report")]) == 0
    for cmd, names in files.items():
        for name in names:
            same &= (tmp_path / "a" / cmd / name).read_bytes() == (tmp_path / "b" / cmd / name).read_bytes()
    criterion("mesh files and reports are byte-identical across two runs", same,
              f"{sum(len(v) for v in files.values())} files compared")
