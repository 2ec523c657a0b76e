import json
from collections import deque

import numpy as np
import pytest

from lwahand.mesh import (
    FULL_COUNT,
    HandMesh,
    HandVertexFeatures,
    MeshLevel,
    SubmeshHierarchy,
    TopologyError,
    gcn_block,
    gcn_fwd,
    load_topology,
    save_topology,
    synthesize_topology,
    upsample_level,
    upsample_to_full,
)
from lwahand.numerics import NumericError, ShapeError


def dump(h, path):
    save_topology(h, path)
    return json.loads(path.read_text())


def write(doc, path):
    path.write_text(json.dumps(doc))
    return path


class TestTopology:
    def test_counts(self, hierarchy):
        assert hierarchy.counts == [63, 126, 252] and hierarchy.full_n == FULL_COUNT

    def test_deterministic(self):
        a, b = synthesize_topology(0), synthesize_topology(0)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.edges, lb.edges)
            np.testing.assert_array_equal(la.upsample, lb.upsample)

    def test_seeds_differ(self):
        assert not np.array_equal(synthesize_topology(0).levels[0].edges, synthesize_topology(1).levels[0].edges)

    def test_invariants(self, hierarchy):
        for lv in hierarchy.levels:
            a = lv.adjacency
            assert np.array_equal(a, a.T) and not np.any(np.diag(a)) and np.all(a.sum(axis=1) >= 1)
            assert np.max(np.abs(lv.upsample.sum(axis=1) - 1.0)) < 1e-12

    def test_level1_connected(self, hierarchy):
        a = hierarchy.levels[1].adjacency
        seen, queue = {0}, deque([0])
        while queue:
            for j in np.flatnonzero(a[queue.popleft()]):
                if j not in seen:
                    seen.add(int(j))
                    queue.append(int(j))
        assert len(seen) == 126

    def test_round_trip(self, hierarchy, tmp_path):
        save_topology(hierarchy, tmp_path / "t.json")
        back = load_topology(tmp_path / "t.json")
        save_topology(back, tmp_path / "t2.json")
        assert (tmp_path / "t.json").read_bytes() == (tmp_path / "t2.json").read_bytes()
        for la, lb in zip(hierarchy.levels, back.levels):
            np.testing.assert_array_equal(la.upsample, lb.upsample)

    def test_self_loop(self, hierarchy, tmp_path):
        doc = dump(hierarchy, tmp_path / "t.json")
        doc["levels"][0]["edges"].append([5, 5])
        with pytest.raises(TopologyError, match="self-loop"):
            load_topology(write(doc, tmp_path / "bad.json"))

    def test_asymmetric(self, hierarchy, tmp_path):
        doc = dump(hierarchy, tmp_path / "t.json")
        doc["levels"][1]["edges"][0] = doc["levels"][1]["edges"][0][::-1]
        with pytest.raises(TopologyError, match="asymmetric"):
            load_topology(write(doc, tmp_path / "bad.json"))

    def test_count_mismatch(self, hierarchy, tmp_path):
        doc = dump(hierarchy, tmp_path / "t.json")
        doc["full_n"] = 700
        with pytest.raises(TopologyError, match="vertex-count mismatch"):
            load_topology(write(doc, tmp_path / "bad.json"))

    def test_rows_not_normalized(self, hierarchy, tmp_path):
        doc = dump(hierarchy, tmp_path / "t.json")
        doc["levels"][0]["upsample"]["data"][0] += 0.5
        with pytest.raises(TopologyError, match="non-normalized upsample rows"):
            load_topology(write(doc, tmp_path / "bad.json"))

    @pytest.mark.parametrize("mutate,invariant", [
        (lambda d: d.pop("levels"), "missing field"),
        (lambda d: d["levels"][0].pop("upsample"), "missing field"),
        (lambda d: d["levels"][0]["edges"].append([0, 9999]), "edge index out of range"),
        (lambda d: d["levels"][0]["edges"].append(list(d["levels"][0]["edges"][0])), "duplicate edge"),
        (lambda d: d["levels"][0]["upsample"].update(shape=[3, 3]), "malformed dense array"),
        (lambda d: d["levels"][0].update(edges=[[1, 2, 3]]), "edge list shape"),
    ])
    def test_named_errors(self, hierarchy, tmp_path, mutate, invariant):
        doc = dump(hierarchy, tmp_path / "t.json")
        mutate(doc)
        with pytest.raises(TopologyError) as info:
            load_topology(write(doc, tmp_path / "bad.json"))
        assert info.value.invariant == invariant

    def test_isolated_vertex(self):
        lv = MeshLevel(3, np.array([[0, 1]]), np.full((6, 3), 1 / 3))
        with pytest.raises(TopologyError, match="isolated vertex"):
            SubmeshHierarchy([lv], full_n=6).validate(expected_counts=None, expected_full=None)

    def test_malformed_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(TopologyError, match="malformed JSON"):
            load_topology(tmp_path / "bad.json")


class TestGcn:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 3))
        out, _ = gcn_fwd(x, np.eye(4), np.eye(3), "identity")
        np.testing.assert_array_equal(out, x)

    def test_constant_preserved_on_regular_graph(self, hierarchy, rng):
        # ring lattice without chords is 4-regular, so D^-1/2 (A+I) D^-1/2 is row-stochastic
        n = 20
        a = sum(np.roll(np.eye(n), s, axis=1) for s in (-2, -1, 0, 1, 2))
        a_hat = a / 5.0
        x = np.tile(rng.normal(size=(1, 3)), (n, 1))
        out, _ = gcn_fwd(x, a_hat, np.eye(3), "identity")
        np.testing.assert_allclose(out, x, atol=1e-14)

    def test_dense_oracle(self, rng):
        edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]
        a = np.eye(5)
        for i, j in edges:
            a[i, j] = a[j, i] = 1.0
        deg = a.sum(axis=1)
        x, w = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
        ref = np.zeros((5, 2))
        for i in range(5):
            for j in range(5):
                ref[i] += a[i, j] / np.sqrt(deg[i] * deg[j]) * (x[j] @ w)
        lv = MeshLevel(5, np.array(edges), np.full((10, 5), 0.2))
        out = gcn_block(HandVertexFeatures("left", 0, x), SubmeshHierarchy([lv], 10), w, "identity")
        assert np.max(np.abs(out.features - ref)) < 1e-12

    def test_permutation_equivariant(self, hierarchy, rng):
        lv = hierarchy.levels[0]
        perm = rng.permutation(lv.n)
        x, w = rng.normal(size=(lv.n, 4)), rng.normal(size=(4, 4))
        out, _ = gcn_fwd(x, lv.normalized_adjacency, w)
        a_p = lv.normalized_adjacency[np.ix_(perm, perm)]
        out_p, _ = gcn_fwd(x[perm], a_p, w)
        assert np.max(np.abs(out_p - out[perm])) < 1e-12

    def test_level_mismatch(self, hierarchy):
        with pytest.raises(ShapeError):
            gcn_block(HandVertexFeatures("left", 1, np.ones((63, 4))), hierarchy, np.eye(4))


class TestUpsample:
    def test_constant_preserved(self, hierarchy):
        out = upsample_level(HandVertexFeatures("left", 0, np.full((63, 4), 2.5)), hierarchy)
        assert out.level == 1 and np.max(np.abs(out.features - 2.5)) < 1e-15

    def test_one_hot_selects_column(self, hierarchy):
        x = np.zeros((126, 1))
        x[7] = 1.0
        out = upsample_level(HandVertexFeatures("right", 1, x), hierarchy)
        np.testing.assert_array_equal(out.features[:, 0], hierarchy.levels[1].upsample[:, 7])

    def test_composition(self, hierarchy, rng):
        x = rng.normal(size=(63, 3))
        step = upsample_level(upsample_level(HandVertexFeatures("left", 0, x), hierarchy), hierarchy)
        assert np.max(np.abs(step.features - hierarchy.upsample_product(0, 2) @ x)) < 1e-12

    def test_top_level_rejected(self, hierarchy):
        with pytest.raises(ShapeError):
            upsample_level(HandVertexFeatures("left", 2, np.ones((252, 2))), hierarchy)


class TestHead:
    def head(self, hierarchy, rng, d=4, bias=True):
        return {"mix": hierarchy.levels[2].upsample, "proj": rng.normal(size=(d, 3)),
                "bias": rng.normal(size=(778, 3)) if bias else np.zeros((778, 3))}

    def test_zero(self, hierarchy, rng):
        head = self.head(hierarchy, rng, bias=False)
        mesh = upsample_to_full(HandVertexFeatures("left", 2, np.zeros((252, 4))), head, hierarchy)
        assert mesh.vertices.shape == (778, 3) and not np.any(mesh.vertices)

    def test_linear(self, hierarchy, rng):
        head = self.head(hierarchy, rng, bias=False)
        x = rng.normal(size=(252, 4))
        a = upsample_to_full(HandVertexFeatures("left", 2, x), head).vertices
        b = upsample_to_full(HandVertexFeatures("left", 2, 3.0 * x), head).vertices
        np.testing.assert_allclose(b, 3.0 * a, atol=1e-14)

    def test_wrong_level(self, hierarchy, rng):
        with pytest.raises(ShapeError):
            upsample_to_full(HandVertexFeatures("left", 1, np.ones((126, 4))), self.head(hierarchy, rng), hierarchy)


def test_hand_mesh_checks():
    with pytest.raises(ShapeError):
        HandMesh(np.ones((5, 2)))
    with pytest.raises(NumericError):
        HandMesh(np.full((5, 3), np.inf))
