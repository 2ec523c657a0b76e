"""Coarse-to-fine hand mesh machinery: submesh hierarchy, graph convolution,
inter-level upsampling and the linear head to the full 778-vertex mesh.

Topology files are JSON::

    {
      "levels": [{"n": 63, "edges": [[i, j], ...], "upsample": {"shape": [126, 63], "data": [...]}}, ...],
      "full_n": 778,
      "full_edges": [[i, j], ...],          # optional, needed by the smooth loss
      "template": {"shape": [778, 3], "data": [...]}   # optional rest mesh in meters
    }

``levels[t].upsample`` maps level t to level t+1; the last level's map goes to
the full mesh. Edge pairs are listed once with ``i < j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .numerics import NumericError, SeededRng, ShapeError, activation_bwd, activation_fwd

OPERATORS = (
    "gcn_block",
    "upsample_level",
    "upsample_to_full",
)

LEVEL_COUNTS = (63, 126, 252)
FULL_COUNT = 778
ROW_SUM_TOL = 1e-9


class TopologyError(ValueError):
    """A topology violates a named structural invariant."""

    def __init__(self, invariant: str, detail: str):
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant


@dataclass
class MeshLevel:
    n: int
    edges: np.ndarray
    upsample: np.ndarray

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    @cached_property
    def normalized_adjacency(self) -> np.ndarray:
        """D^{-1/2} (A + I) D^{-1/2}."""
        a = self.adjacency + np.eye(self.n)
        inv = 1.0 / np.sqrt(a.sum(axis=1))
        return a * inv[:, None] * inv[None, :]

    @property
    def nnz(self) -> int:
        """Nonzeros of A + I."""
        return 2 * len(self.edges) + self.n


@dataclass
class SubmeshHierarchy:
    levels: list[MeshLevel]
    full_n: int = FULL_COUNT
    full_edges: np.ndarray | None = None
    template: np.ndarray | None = None

    @property
    def counts(self) -> list[int]:
        return [lv.n for lv in self.levels]

    def validate(self, expected_counts=LEVEL_COUNTS, expected_full: int = FULL_COUNT) -> "SubmeshHierarchy":
        if expected_counts is not None and tuple(self.counts) != tuple(expected_counts):
            raise TopologyError("vertex-count mismatch", f"levels {self.counts} != {list(expected_counts)}")
        if expected_full is not None and self.full_n != expected_full:
            raise TopologyError("vertex-count mismatch", f"full_n {self.full_n} != {expected_full}")
        for t, lv in enumerate(self.levels):
            nxt = self.levels[t + 1].n if t + 1 < len(self.levels) else self.full_n
            _check_edges(lv.edges, lv.n, f"levels[{t}]", require_cover=True)
            if lv.upsample.shape != (nxt, lv.n):
                raise TopologyError("upsample shape", f"levels[{t}].upsample {lv.upsample.shape} != {(nxt, lv.n)}")
            if not np.all(np.isfinite(lv.upsample)):
                raise TopologyError("non-finite upsample", f"levels[{t}]")
            dev = np.max(np.abs(lv.upsample.sum(axis=1) - 1.0))
            if dev > ROW_SUM_TOL:
                raise TopologyError("non-normalized upsample rows", f"levels[{t}] max row-sum deviation {dev:.3g}")
        if self.full_edges is not None:
            _check_edges(self.full_edges, self.full_n, "full_edges", require_cover=False)
        if self.template is not None:
            if self.template.shape != (self.full_n, 3) or not np.all(np.isfinite(self.template)):
                raise TopologyError("template shape", f"template {self.template.shape} != {(self.full_n, 3)}")
        return self

    def upsample_product(self, start: int, stop: int) -> np.ndarray:
        """Composite map from level ``start`` to level ``stop`` (stop > start)."""
        m = np.eye(self.levels[start].n)
        for t in range(start, stop):
            m = self.levels[t].upsample @ m
        return m

    def to_json(self) -> dict:
        out = {
            "levels": [
                {
                    "n": lv.n,
                    "edges": lv.edges.tolist(),
                    "upsample": {"shape": list(lv.upsample.shape), "data": lv.upsample.ravel().tolist()},
                }
                for lv in self.levels
            ],
            "full_n": self.full_n,
        }
        if self.full_edges is not None:
            out["full_edges"] = self.full_edges.tolist()
        if self.template is not None:
            out["template"] = {"shape": list(self.template.shape), "data": self.template.ravel().tolist()}
        return out


def _check_edges(edges: np.ndarray, n: int, where: str, require_cover: bool) -> None:
    if edges.ndim != 2 or edges.shape[1] != 2 or len(edges) == 0:
        raise TopologyError("edge list shape", f"{where}.edges must be a non-empty list of pairs")
    if edges.min() < 0 or edges.max() >= n:
        raise TopologyError("edge index out of range", f"{where}.edges must index [0, {n})")
    if np.any(edges[:, 0] == edges[:, 1]):
        i = int(edges[edges[:, 0] == edges[:, 1]][0, 0])
        raise TopologyError("self-loop", f"{where} vertex {i} is adjacent to itself")
    if np.any(edges[:, 0] > edges[:, 1]):
        raise TopologyError("asymmetric adjacency", f"{where}.edges must list each pair once as i < j")
    if len(np.unique(edges, axis=0)) != len(edges):
        raise TopologyError("duplicate edge", f"{where}.edges contains repeated pairs")
    if require_cover:
        deg = np.bincount(edges.ravel(), minlength=n)
        if np.any(deg == 0):
            raise TopologyError("isolated vertex", f"{where} vertex {int(np.argmin(deg))} has degree 0")


def _dense_from_json(obj, where: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError("malformed dense array", f"{where}: {exc}") from exc
    if data.size != int(np.prod(shape)):
        raise TopologyError("malformed dense array", f"{where}: {data.size} values for shape {shape}")
    return data.reshape(shape)


def _edges_from_json(obj, where: str) -> np.ndarray:
    try:
        edges = np.asarray(obj, dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise TopologyError("edge list shape", f"{where}: {exc}") from exc
    if edges.ndim != 2 or edges.shape[-1] != 2:
        raise TopologyError("edge list shape", f"{where} must be a list of [i, j] pairs")
    return edges


def topology_from_json(doc: dict, expected_counts=LEVEL_COUNTS, expected_full: int = FULL_COUNT) -> SubmeshHierarchy:
    if not isinstance(doc, dict) or "levels" not in doc or "full_n" not in doc:
        raise TopologyError("missing field", "topology needs 'levels' and 'full_n'")
    levels = []
    for t, lv in enumerate(doc["levels"]):
        where = f"levels[{t}]"
        if not isinstance(lv, dict) or not {"n", "edges", "upsample"} <= set(lv):
            raise TopologyError("missing field", f"{where} needs n, edges, upsample")
        levels.append(MeshLevel(int(lv["n"]), _edges_from_json(lv["edges"], where + ".edges"),
                                _dense_from_json(lv["upsample"], where + ".upsample")))
    full_edges = _edges_from_json(doc["full_edges"], "full_edges") if "full_edges" in doc else None
    template = _dense_from_json(doc["template"], "template") if "template" in doc else None
    h = SubmeshHierarchy(levels, int(doc["full_n"]), full_edges, template)
    return h.validate(expected_counts, expected_full)


def load_topology(path, expected_counts=LEVEL_COUNTS, expected_full: int = FULL_COUNT) -> SubmeshHierarchy:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError("malformed JSON", f"{path}: {exc}") from exc
    return topology_from_json(doc, expected_counts, expected_full)


def save_topology(h: SubmeshHierarchy, path) -> None:
    Path(path).write_text(json.dumps(h.to_json(), separators=(",", ":")))


def _ring_edges(n: int, reach: int) -> set[tuple[int, int]]:
    edges = set()
    for i in range(n):
        for r in range(1, reach + 1):
            j = (i + r) % n
            edges.add((min(i, j), max(i, j)))
    return edges


def _with_chords(n: int, rng: SeededRng, count: int) -> np.ndarray:
    edges = _ring_edges(n, 2)
    picks = rng.integers(0, n, 2 * count).reshape(count, 2)
    for i, j in picks:
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return np.array(sorted(edges), dtype=np.int64)


def _midpoint_upsample(n: int) -> np.ndarray:
    """Fine vertex 2i copies coarse i; fine 2i+1 is the midpoint of i and i+1."""
    u = np.zeros((2 * n, n))
    idx = np.arange(n)
    u[2 * idx, idx] = 1.0
    u[2 * idx + 1, idx] = 0.5
    u[2 * idx + 1, (idx + 1) % n] += 0.5
    return u


def _dense_ring_interp(n_fine: int, n_coarse: int, width: float) -> np.ndarray:
    pos = np.arange(n_fine) * (n_coarse / n_fine)
    diff = np.abs(pos[:, None] - np.arange(n_coarse)[None, :])
    dist = np.minimum(diff, n_coarse - diff)
    w = np.exp(-0.5 * (dist / width) ** 2)
    return w / w.sum(axis=1, keepdims=True)


def synthetic_template(n: int = FULL_COUNT) -> np.ndarray:
    """Closed hand-sized curve (about 10 cm across) used as a rest mesh."""
    theta = 2.0 * np.pi * np.arange(n) / n
    return np.stack([0.045 * np.cos(theta), 0.09 * np.sin(theta) + 0.04, 0.012 * np.sin(3.0 * theta)], axis=1)


def synthesize_topology(seed: int = 0, counts=LEVEL_COUNTS, full_n: int = FULL_COUNT) -> SubmeshHierarchy:
    """Deterministic ring-lattice hierarchy with seeded chords.

    Each level is a ring where every vertex links to its two nearest neighbours
    on each side, plus ``n // 16`` seeded chords. Consecutive levels double the
    vertex count by edge-midpoint insertion; the last level reaches the full
    mesh through a dense Gaussian interpolation along the ring.
    """
    counts = tuple(counts)
    for a, b in zip(counts, counts[1:]):
        if b != 2 * a:
            raise ValueError(f"synthetic levels must double: {counts}")
    rng = SeededRng(seed)
    levels = []
    for t, n in enumerate(counts):
        edges = _with_chords(n, rng, max(1, n // 16))
        if t + 1 < len(counts):
            up = _midpoint_upsample(n)
        else:
            up = _dense_ring_interp(full_n, n, width=0.6 + 0.2 * rng.uniform(1)[0])
        levels.append(MeshLevel(n, edges, up))
    full_edges = np.array(sorted(_ring_edges(full_n, 2)), dtype=np.int64)
    return SubmeshHierarchy(levels, full_n, full_edges, synthetic_template(full_n)).validate(counts, full_n)


def resolve_topology(source: str) -> SubmeshHierarchy:
    """``synthetic:<seed>`` or a path to a topology JSON file."""
    if source.startswith("synthetic:"):
        return synthesize_topology(int(source.split(":", 1)[1]))
    return load_topology(source)


# ---------------------------------------------------------------------------
# Vertex features and meshes
# ---------------------------------------------------------------------------


@dataclass
class HandVertexFeatures:
    hand: str
    level: int
    features: np.ndarray


@dataclass
class HandMesh:
    """Root-relative vertices in meters; ``joints`` overrides regressed joints when set."""

    vertices: np.ndarray
    hand: str = "right"
    joints: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ShapeError(f"HandMesh vertices must be N x 3, got {self.vertices.shape}")
        if not np.all(np.isfinite(self.vertices)):
            raise NumericError("HandMesh vertices must be finite")


def gcn_fwd(x, a_hat, w, act: str = "silu"):
    if a_hat.shape != (x.shape[0], x.shape[0]) or w.shape[0] != x.shape[1]:
        raise ShapeError(f"gcn_block: features {x.shape}, adjacency {a_hat.shape}, weight {w.shape}")
    ax = a_hat @ x
    pre = ax @ w
    out, act_cache = activation_fwd(pre, act)
    return out, (ax, a_hat, w, act_cache, act)


def gcn_bwd(d_out, cache) -> dict:
    ax, a_hat, w, act_cache, act = cache
    d_pre = activation_bwd(d_out, act_cache, act)
    d_w = ax.T @ d_pre
    d_x = a_hat.T @ (d_pre @ w.T)
    return {"x": d_x, "w": d_w}


def gcn_block(features: HandVertexFeatures, hierarchy: SubmeshHierarchy, weight, act: str = "silu") -> HandVertexFeatures:
    """act(D^{-1/2}(A+I)D^{-1/2} X W) on the feature's own level."""
    lv = hierarchy.levels[features.level]
    if features.features.shape[0] != lv.n:
        raise ShapeError(f"gcn_block: {features.features.shape[0]} vertices at level {features.level}, expected {lv.n}")
    out, _ = gcn_fwd(np.asarray(features.features, dtype=np.float64), lv.normalized_adjacency,
                     np.asarray(weight, dtype=np.float64), act)
    return HandVertexFeatures(features.hand, features.level, out)


def upsample_level(features: HandVertexFeatures, hierarchy: SubmeshHierarchy) -> HandVertexFeatures:
    t = features.level
    if t >= len(hierarchy.levels) - 1:
        raise ShapeError(f"upsample_level: level {t} is the top submesh level")
    lv = hierarchy.levels[t]
    if features.features.shape[0] != lv.n:
        raise ShapeError(f"upsample_level: {features.features.shape[0]} vertices at level {t}, expected {lv.n}")
    return HandVertexFeatures(features.hand, t + 1, lv.upsample @ features.features)


def head_fwd(x, mix, proj, bias):
    """Full-mesh head: mix (778 x 252) @ (x @ proj) + bias."""
    if mix.shape[1] != x.shape[0] or proj.shape != (x.shape[1], 3) or bias.shape != (mix.shape[0], 3):
        raise ShapeError(f"head: features {x.shape}, mix {mix.shape}, proj {proj.shape}, bias {bias.shape}")
    xp = x @ proj
    return mix @ xp + bias, (x, xp, mix, proj)


def head_bwd(d_out, cache) -> dict:
    x, xp, mix, proj = cache
    d_xp = mix.T @ d_out
    return {"x": d_xp @ proj.T, "mix": d_out @ xp.T, "proj": x.T @ d_xp, "bias": d_out}


def upsample_to_full(features: HandVertexFeatures, head: dict, hierarchy: SubmeshHierarchy | None = None) -> HandMesh:
    """Linear map from level-2 features to full-mesh vertex coordinates.

    ``head`` holds ``mix`` (778 x 252), ``proj`` (d x 3) and ``bias`` (778 x 3).
    """
    top = len(hierarchy.levels) - 1 if hierarchy is not None else 2
    if features.level != top:
        raise ShapeError(f"upsample_to_full: expected level {top} features, got level {features.level}")
    out, _ = head_fwd(np.asarray(features.features, dtype=np.float64), np.asarray(head["mix"], dtype=np.float64),
                      np.asarray(head["proj"], dtype=np.float64), np.asarray(head["bias"], dtype=np.float64))
    return HandMesh(out, features.hand)
