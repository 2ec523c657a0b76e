import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lwahand.config import toy_config
from lwahand.losses import (
    DegenerateInputError,
    EvalProtocol,
    JointRegressor,
    combined_loss,
    evaluate,
    joint_loss,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
    sgd_fit,
    smooth_loss,
    vertex_loss,
)
from lwahand.mesh import HandMesh
from lwahand.model import Model
from lwahand.numerics import ShapeError

PROTOCOL = EvalProtocol()


def hand(rng, n=778):
    return 0.05 * rng.normal(size=(n, 3))


class TestLosses:
    def test_vertex_offset_one_mm(self, rng):
        gt = hand(rng)
        assert abs(vertex_loss(gt + 0.001, gt) - 1.0) < 1e-9

    def test_vertex_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            vertex_loss(hand(rng, 10), hand(rng, 11))

    def test_joint_loop_oracle(self, rng, regressor):
        pred, gt = hand(rng), 0.05 * rng.normal(size=(21, 3))
        m = regressor.matrix
        total = 0.0
        for j in range(21):
            for a in range(3):
                total += abs(sum(m[j, v] * pred[v, a] for v in range(778)) - gt[j, a])
        assert abs(joint_loss(pred, gt, regressor) - 1000.0 * total / 63) < 1e-9

    def test_joint_translation(self, rng, regressor):
        # rows sum to one, so translating both pred and target leaves the loss unchanged
        pred, gt = hand(rng), 0.05 * rng.normal(size=(21, 3))
        shift = np.array([0.3, -0.1, 0.2])
        assert abs(joint_loss(pred + shift, gt + shift, regressor) - joint_loss(pred, gt, regressor)) < 1e-9

    def test_regressor_rows(self):
        with pytest.raises(ValueError, match="sum to 1"):
            JointRegressor(np.ones((2, 3)))

    def test_smooth_scaling(self, rng, hierarchy):
        ref = hand(rng)
        edges = hierarchy.full_edges
        lengths = np.linalg.norm(ref[edges[:, 0]] - ref[edges[:, 1]], axis=1)
        assert abs(smooth_loss(2.0 * ref, edges, ref, unit=1.0) - np.mean(lengths**2)) < 1e-12
        assert smooth_loss(ref + 1.0, edges, ref) < 1e-20

    def test_smooth_needs_edges(self, rng):
        with pytest.raises(ShapeError):
            smooth_loss(hand(rng, 5), [], hand(rng, 5))


class TestEvaluate:
    def pair(self, rng, regressor):
        return [HandMesh(hand(rng), "left"), HandMesh(hand(rng), "right")]

    def test_identity(self, rng, regressor):
        gt = self.pair(rng, regressor)
        assert evaluate(gt, gt, PROTOCOL, regressor) == {"mpjpe_mm": 0.0, "mpvpe_mm": 0.0}

    @settings(max_examples=25, deadline=None)
    @given(scale=st.floats(0.2, 5.0), shift=st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    def test_similarity_invariance(self, hierarchy, regressor, scale, shift):
        rng = np.random.default_rng(7)
        gt = [HandMesh(hand(rng)), HandMesh(hand(rng))]
        pred = [HandMesh(scale * m.vertices) for m in gt]
        res = evaluate(pred, gt, PROTOCOL, regressor)
        assert res["mpjpe_mm"] < 1e-9 and res["mpvpe_mm"] < 1e-9
        moved = [HandMesh(m.vertices + np.array(shift)) for m in gt]
        res = evaluate(moved, moved, PROTOCOL, regressor)
        assert res["mpjpe_mm"] < 1e-9 and res["mpvpe_mm"] < 1e-9

    def test_scale_by_1_3(self, rng, regressor):
        gt = self.pair(rng, regressor)
        res = evaluate([HandMesh(1.3 * m.vertices) for m in gt], gt, PROTOCOL, regressor)
        assert res["mpjpe_mm"] < 1e-9 and res["mpvpe_mm"] < 1e-9

    def test_single_joint_offset(self, rng, regressor):
        verts = [hand(rng), hand(rng)]
        joints = [regressor(v) for v in verts]
        gt = [HandMesh(v, joints=j) for v, j in zip(verts, joints)]
        moved = []
        for v, j in zip(verts, joints):
            j = j.copy()
            j[5, 1] += 0.002
            moved.append(HandMesh(v, joints=j))
        res = evaluate(moved, gt, PROTOCOL, regressor)
        assert abs(res["mpjpe_mm"] - 2.0 / 21) < 1e-9 and res["mpvpe_mm"] < 1e-9

    def test_degenerate(self, rng, regressor):
        gt = self.pair(rng, regressor)
        flat = [HandMesh(np.zeros((778, 3))), HandMesh(np.zeros((778, 3)))]
        with pytest.raises(DegenerateInputError):
            evaluate(flat, gt, PROTOCOL, regressor)
        with pytest.raises(DegenerateInputError):
            evaluate(gt, flat, PROTOCOL, regressor)

    def test_protocol_fixed_scale(self):
        with pytest.raises(ValueError):
            EvalProtocol(train_scale_cm=10.0)


class TestData:
    def test_dataset_round_trip(self, hierarchy, regressor, tmp_path):
        data = make_synthetic_dataset(toy_config(), hierarchy, regressor, 2, seed=3)
        save_dataset(data, tmp_path)
        back = load_dataset(tmp_path, image_size=16)
        for a, b in zip(data, back):
            for f in ("image", "left", "right", "joints"):
                np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_samples_at_train_scale(self, hierarchy, regressor):
        s = make_synthetic_dataset(toy_config(), hierarchy, regressor, 1)[0]
        for j in s.joints:
            assert abs(PROTOCOL.bone_length(j) - 0.095) < 1e-12 and np.max(np.abs(j[0])) < 1e-15

    def test_empty_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)


class TestFit:
    def test_combined_loss_zero_at_target(self, hierarchy, regressor):
        s = make_synthetic_dataset(toy_config(), hierarchy, regressor, 1)[0]
        loss, parts, dl, dr = combined_loss(s.left, s.right, s, toy_config(), hierarchy, regressor)
        assert loss < 1e-12 and all(v < 1e-12 for v in parts.values())

    def test_zero_lr_is_flat(self, hierarchy, regressor):
        model = Model.create(toy_config(), hierarchy=hierarchy)
        data = make_synthetic_dataset(model.cfg, hierarchy, regressor, 1)
        trace = sgd_fit(model, data, 5, 0.0, regressor)
        assert len(trace) == 6 and max(trace) - min(trace) == 0.0

    def test_deterministic(self, hierarchy, regressor):
        traces = []
        for _ in range(2):
            model = Model.create(toy_config(), hierarchy=hierarchy)
            data = make_synthetic_dataset(model.cfg, hierarchy, regressor, 1)
            traces.append(sgd_fit(model, data, 10, 1e-3, regressor, clip_norm=100.0))
        assert traces[0] == traces[1] and traces[0][-1] < traces[0][0]
