import numpy as np
import pytest

import oracles
from lwahand.config import toy_config
from lwahand.encoder import encoder_forward
from lwahand.mesh import HandVertexFeatures
from lwahand.model import BridgeError, BridgeLevel, Model, bridge_forward, pipeline_bwd, pipeline_forward, pipeline_fwd, zero_params
from lwahand.numerics import ShapeError


def level_inputs(model, t, rng):
    pyr = encoder_forward(rng.uniform(size=(3, 16, 16)), model.params, model.cfg)
    n = model.hierarchy.levels[t].n
    d = model.cfg.encoder.dim
    lv = BridgeLevel.from_params(model.params, model.cfg, model.hierarchy, t)
    z = pyr.tokens.snapshots[model.cfg.encoder.taps[t]]
    return pyr.levels[t], z, rng.normal(size=(n, d)), rng.normal(size=(n, d)), lv


def test_composition_matches_loop_oracle(toy_model, rng):
    y, z, left, right, lv = level_inputs(toy_model, 0, rng)
    out = bridge_forward(y, z, HandVertexFeatures("left", 0, left), HandVertexFeatures("right", 0, right), lv)

    d = lv.proj_in.shape[1]
    feats = y.reshape(y.shape[0], -1).T @ lv.proj_in
    attn, _ = oracles.query_only(feats, z, lv.attn_q, np.eye(d), lv.heads)
    ctx = oracles.pool(attn, feats)
    offset = ctx.mean(axis=0) @ lv.fuse[d:]
    fl, fr = left @ lv.fuse[:d] + offset, right @ lv.fuse[:d] + offset
    l2r, r2l = oracles.cross_hand(fl, fr, lv.cross)
    m = lv.mlp
    ref_l = oracles.mlp_merge(fl, r2l, m.w1, m.b1, m.w2, m.b2)
    ref_r = oracles.mlp_merge(fr, l2r, m.w1, m.b1, m.w2, m.b2)
    assert np.max(np.abs(out.left - ref_l)) < 1e-10
    assert np.max(np.abs(out.right - ref_r)) < 1e-10
    assert np.max(np.abs(out.attention.weights.sum(axis=1) - 1.0)) < 1e-12


@pytest.mark.parametrize("t", [0, 2])
def test_hand_swap_symmetry(toy_model, rng, t):
    ps = toy_model.params
    for name in list(ps):
        if f"bridge{t}.cross.right." in name:
            ps[name] = ps[name.replace(".right.", ".left.")].copy()
    y, z, left, right, lv = level_inputs(toy_model, t, rng)
    a = bridge_forward(y, z, HandVertexFeatures("left", t, left), HandVertexFeatures("right", t, right), lv)
    b = bridge_forward(y, z, HandVertexFeatures("left", t, right), HandVertexFeatures("right", t, left), lv)
    assert np.max(np.abs(a.left - b.right)) < 1e-12 and np.max(np.abs(a.right - b.left)) < 1e-12


def test_zero_context_path(toy_model, rng):
    """With zero image features the summary vanishes and each hand sees only its own and the other hand's features."""
    y, z, left, right, lv = level_inputs(toy_model, 1, rng)
    out = bridge_forward(np.zeros_like(y), z, HandVertexFeatures("left", 1, left), HandVertexFeatures("right", 1, right), lv)
    d = lv.proj_in.shape[1]
    fl, fr = left @ lv.fuse[:d], right @ lv.fuse[:d]
    _, r2l = oracles.cross_hand(fl, fr, lv.cross)
    m = lv.mlp
    assert np.max(np.abs(out.left - oracles.mlp_merge(fl, r2l, m.w1, m.b1, m.w2, m.b2))) < 1e-10


def test_level_mismatch(toy_model, rng):
    y, z, left, right, lv = level_inputs(toy_model, 1, rng)
    with pytest.raises(BridgeError, match="bridge level 1"):
        bridge_forward(y, z, HandVertexFeatures("left", 1, left[:5]), HandVertexFeatures("right", 1, right[:5]), lv)
    with pytest.raises(BridgeError):
        bridge_forward(y, z, HandVertexFeatures("left", 0, left), HandVertexFeatures("right", 1, right), lv)
    assert issubclass(BridgeError, ShapeError)


class TestPipeline:
    def test_shapes_and_levels(self, toy_model, rng):
        result, _ = pipeline_fwd(rng.uniform(size=(3, 16, 16)), toy_model)
        assert result.left.vertices.shape == (778, 3) and result.right.vertices.shape == (778, 3)
        assert result.level_counts == [63, 126, 252, 778]
        diag = result.diagnostics()
        assert max(diag["bridge_attention_row_sum_max_dev"]) < 1e-12
        assert diag["encoder_attention_row_sum_max_dev"] < 1e-12

    def test_zero_weights_give_bias(self, toy_model, rng):
        toy_model.params = zero_params(toy_model.params)
        bias = rng.normal(size=(778, 3))
        toy_model.params["head.left.bias"] = bias
        left, right = pipeline_forward(rng.uniform(size=(3, 16, 16)), toy_model)
        np.testing.assert_array_equal(left.vertices, bias)
        assert not np.any(right.vertices)

    def test_deterministic(self, hierarchy, rng):
        image = rng.uniform(size=(3, 16, 16))
        a = pipeline_forward(image, Model.create(toy_config(), seed=4, hierarchy=hierarchy))
        b = pipeline_forward(image, Model.create(toy_config(), seed=4, hierarchy=hierarchy))
        assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a, b))

    def test_image_reaches_output(self, toy_model, rng):
        image = rng.uniform(size=(3, 16, 16))
        base = pipeline_forward(image, toy_model)[0].vertices
        image[1, 5, 7] += 0.5
        assert np.max(np.abs(pipeline_forward(image, toy_model)[0].vertices - base)) > 0

    def test_directional_derivative(self, toy_model, rng):
        # cheap sanity of the backward pass on one parameter; the full sweep lives in the gradcheck tests
        image = rng.uniform(size=(3, 16, 16))
        r_l, r_r = rng.normal(size=(778, 3)), rng.normal(size=(778, 3))
        _, cache = pipeline_fwd(image, toy_model)
        g = pipeline_bwd(r_l, r_r, toy_model, cache)["bridge1.fuse"]
        base = toy_model.params["bridge1.fuse"].copy()
        v = rng.normal(size=base.shape)

        def f(t):
            toy_model.params["bridge1.fuse"] = base + t * v
            left, right = pipeline_forward(image, toy_model)
            return np.sum(left.vertices * r_l) + np.sum(right.vertices * r_r)

        numeric = (f(1e-5) - f(-1e-5)) / 2e-5
        assert abs(numeric - np.sum(g * v)) <= 1e-5 * max(1.0, abs(numeric))

    def test_separable_everywhere(self, hierarchy, rng):
        cfg = toy_config()
        cfg.bridge.cross_mode = "separable"
        left, right = pipeline_forward(rng.uniform(size=(3, 16, 16)), Model.create(cfg, hierarchy=hierarchy))
        assert left.vertices.shape == right.vertices.shape == (778, 3)
