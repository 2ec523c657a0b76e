"""Training losses, the MPJPE/MPVPE evaluation protocol and a desk-scale fit loop.

Meshes are in meters; losses and metrics are reported in millimeters
(``unit=1000``), so a 1 mm offset gives a vertex loss of 1.0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .config import EvalConfig, ModelConfig
from .mesh import HandMesh, SubmeshHierarchy
from .numerics import NumericError, SeededRng, ShapeError

log = logging.getLogger(__name__)

MM = 1000.0


class DegenerateInputError(ValueError):
    """Evaluation input with a zero-length reference bone."""


def _verts(m) -> np.ndarray:
    return m.vertices if isinstance(m, HandMesh) else np.asarray(m, dtype=np.float64)


# ---------------------------------------------------------------------------
# Joint regressor and protocol
# ---------------------------------------------------------------------------


@dataclass
class JointRegressor:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        dev = np.max(np.abs(self.matrix.sum(axis=1) - 1.0))
        if dev > 1e-9:
            raise ValueError(f"joint regressor rows must sum to 1 (max deviation {dev:.3g})")

    def __call__(self, vertices) -> np.ndarray:
        v = _verts(vertices)
        if v.shape[0] != self.matrix.shape[1]:
            raise ShapeError(f"regressor expects {self.matrix.shape[1]} vertices, got {v.shape[0]}")
        return self.matrix @ v

    @classmethod
    def load(cls, path) -> "JointRegressor":
        return cls(tensorio.load(path))


def synthetic_regressor(template: np.ndarray, num_joints: int = 21, neighbours: int = 4) -> JointRegressor:
    """Each joint averages the vertices nearest to an evenly spaced anchor vertex."""
    n = template.shape[0]
    anchors = (np.arange(num_joints) * n) // num_joints
    j = np.zeros((num_joints, n))
    for r, a in enumerate(anchors):
        dist = np.linalg.norm(template - template[a], axis=1)
        near = np.argsort(dist, kind="stable")[:neighbours]
        j[r, near] = 1.0 / neighbours
    return JointRegressor(j)


@dataclass(frozen=True)
class EvalProtocol:
    root_joint: int = 0
    metacarpal_joint_pair: tuple[int, int] = (0, 9)
    train_scale_cm: float = 9.5

    def __post_init__(self):
        if self.train_scale_cm != 9.5:
            raise ValueError("train_scale_cm is fixed at 9.5")

    @classmethod
    def from_config(cls, ev: EvalConfig) -> "EvalProtocol":
        return cls(ev.root_joint, tuple(ev.metacarpal), ev.train_scale_cm)

    def bone_length(self, joints: np.ndarray) -> float:
        a, b = self.metacarpal_joint_pair
        return float(np.linalg.norm(joints[a] - joints[b]))


def normalize_to_train_scale(vertices, joints, protocol: EvalProtocol):
    """Root-align and rescale so the middle metacarpal is ``train_scale_cm`` long."""
    length = protocol.bone_length(joints)
    if length <= 0:
        raise DegenerateInputError("zero-length metacarpal")
    s = protocol.train_scale_cm / 100.0 / length
    root = joints[protocol.root_joint]
    return (vertices - root) * s, (joints - root) * s


# ---------------------------------------------------------------------------
# Losses (value, gradient w.r.t. predicted vertices)
# ---------------------------------------------------------------------------


def vertex_loss_grad(pred, gt, unit: float = MM):
    p, g = _verts(pred), _verts(gt)
    if p.shape != g.shape:
        raise ShapeError(f"vertex_loss: {p.shape} != {g.shape}")
    diff = p - g
    return unit * float(np.mean(np.abs(diff))), unit * np.sign(diff) / diff.size


def vertex_loss(pred, gt, unit: float = MM) -> float:
    """Mean L1 distance over all coordinates."""
    return vertex_loss_grad(pred, gt, unit)[0]


def joint_loss_grad(pred, gt_joints, regressor: JointRegressor, unit: float = MM):
    p = _verts(pred)
    gj = np.asarray(gt_joints, dtype=np.float64)
    pj = regressor(p)
    if pj.shape != gj.shape:
        raise ShapeError(f"joint_loss: regressed {pj.shape} != target {gj.shape}")
    diff = pj - gj
    return unit * float(np.mean(np.abs(diff))), regressor.matrix.T @ (unit * np.sign(diff) / diff.size)


def joint_loss(pred, gt_joints, regressor: JointRegressor, unit: float = MM) -> float:
    """Mean L1 distance between regressed and target joints."""
    return joint_loss_grad(pred, gt_joints, regressor, unit)[0]


def smooth_loss_grad(pred, edges, template, unit: float = MM):
    p, t = _verts(pred), _verts(template)
    if edges is None or len(edges) == 0:
        raise ShapeError("smooth_loss: full-level edge list is required")
    if p.shape != t.shape:
        raise ShapeError(f"smooth_loss: {p.shape} != template {t.shape}")
    edges = np.asarray(edges)
    i, j = edges[:, 0], edges[:, 1]
    vec = p[i] - p[j]
    lp = np.linalg.norm(vec, axis=1)
    lt = np.linalg.norm(t[i] - t[j], axis=1)
    r = unit * (lp - lt)
    value = float(np.mean(r**2))
    coef = 2.0 * unit * r / len(edges) / np.maximum(lp, 1e-300)
    ge = coef[:, None] * vec
    grad = np.zeros_like(p)
    np.add.at(grad, i, ge)
    np.add.at(grad, j, -ge)
    return value, grad


def smooth_loss(pred, edges, template, unit: float = MM) -> float:
    """Mean squared difference between predicted and reference edge lengths."""
    return smooth_loss_grad(pred, edges, template, unit)[0]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _hand_errors(pred: HandMesh, gt: HandMesh, protocol: EvalProtocol, regressor: JointRegressor):
    jp = pred.joints if pred.joints is not None else regressor(pred.vertices)
    jg = gt.joints if gt.joints is not None else regressor(gt.vertices)
    rp, rg = jp[protocol.root_joint], jg[protocol.root_joint]
    jp, vp = jp - rp, pred.vertices - rp
    jg, vg = jg - rg, gt.vertices - rg
    lg = protocol.bone_length(jg)
    lp = protocol.bone_length(jp)
    if lg <= 0.0:
        raise DegenerateInputError("ground-truth metacarpal has zero length")
    if lp <= 0.0:
        raise DegenerateInputError("predicted metacarpal has zero length")
    s = lg / lp
    mpjpe = float(np.mean(np.linalg.norm(s * jp - jg, axis=1)))
    mpvpe = float(np.mean(np.linalg.norm(s * vp - vg, axis=1)))
    return mpjpe * MM, mpvpe * MM


def evaluate(pred, gt, protocol: EvalProtocol, regressor: JointRegressor) -> dict:
    """MPJPE / MPVPE in mm over both hands after root alignment and bone rescaling.

    ``pred`` and ``gt`` are (left, right) pairs of HandMesh.
    """
    if len(pred) != len(gt):
        raise ValueError("pred and gt must list the same hands")
    errs = [_hand_errors(p, g, protocol, regressor) for p, g in zip(pred, gt)]
    return {"mpjpe_mm": float(np.mean([e[0] for e in errs])), "mpvpe_mm": float(np.mean([e[1] for e in errs]))}


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    left: np.ndarray
    right: np.ndarray
    # (2, J, 3): left then right
    joints: np.ndarray


def synthetic_hand(template: np.ndarray, rng: SeededRng, regressor: JointRegressor, protocol: EvalProtocol,
                   mirror: bool = False, amplitude: float = 0.01):
    """Template plus a smooth random deformation, normalized to the training scale."""
    n = template.shape[0]
    theta = 2.0 * np.pi * np.arange(n) / n
    coeff = rng.uniform((3, 3, 2), -amplitude, amplitude)
    verts = template.copy()
    for k in range(3):
        verts += coeff[k, :, 0] * np.cos((k + 1) * theta)[:, None] + coeff[k, :, 1] * np.sin((k + 1) * theta)[:, None]
    if mirror:
        verts[:, 0] = -verts[:, 0]
    return normalize_to_train_scale(verts, regressor(verts), protocol)


def render_hands(left_joints: np.ndarray, right_joints: np.ndarray, size: int, extent: float = 0.125,
                 sigma_px: float = 1.0) -> np.ndarray:
    """Splat joints as Gaussian blobs: channel 0 left hand, 1 right hand, 2 depth-weighted both.

    Pixel coordinates map x, y in [-extent, extent] meters onto the image.
    """
    grid = (np.arange(size) + 0.5) / size * 2.0 * extent - extent
    s = sigma_px * 2.0 * extent / size
    img = np.zeros((3, size, size))
    for ch, joints in ((0, left_joints), (1, right_joints)):
        gy = np.exp(-((grid[None, :] - joints[:, 1:2]) ** 2) / (2 * s * s))
        gx = np.exp(-((grid[None, :] - joints[:, 0:1]) ** 2) / (2 * s * s))
        blobs = gy[:, :, None] * gx[:, None, :]
        img[ch] = blobs.sum(axis=0)
        img[2] += np.tensordot(1.0 + joints[:, 2] / extent, blobs, axes=1)
    return img


def make_synthetic_dataset(cfg: ModelConfig, hierarchy: SubmeshHierarchy, regressor: JointRegressor, n: int,
                           seed: int = 0) -> list[Sample]:
    if hierarchy.template is None:
        raise ShapeError("synthetic dataset needs a template mesh in the topology")
    rng = SeededRng(seed)
    protocol = EvalProtocol.from_config(cfg.eval)
    out = []
    for _ in range(n):
        left, jl = synthetic_hand(hierarchy.template, rng, regressor, protocol, mirror=True)
        right, jr = synthetic_hand(hierarchy.template, rng, regressor, protocol)
        size = cfg.image_size
        image = render_hands(jl, jr, size, sigma_px=size / 16) + 0.05 * rng.normal((3, size, size))
        out.append(Sample(image, left, right, np.stack([jl, jr])))
    return out


def save_dataset(samples: list[Sample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        tensorio.save_bundle(d / f"sample_{i:03d}.lwat", [s.image, s.left, s.right, s.joints])


def load_dataset(directory, image_size: int | None = None, full_n: int = 778) -> list[Sample]:
    files = sorted(Path(directory).glob("*.lwat"))
    if not files:
        raise FileNotFoundError(f"{directory}: no .lwat samples")
    out = []
    for f in files:
        arrays = tensorio.load_bundle(f)
        if len(arrays) != 4:
            raise tensorio.FormatError(f"{f.name}: expected 4 tensors (image, left, right, joints), got {len(arrays)}")
        image, left, right, joints = arrays
        if image.ndim != 3 or image.shape[0] != 3 or (image_size and image.shape[1:] != (image_size, image_size)):
            raise tensorio.FormatError(f"{f.name}: image shape {image.shape}")
        if left.shape != (full_n, 3) or right.shape != (full_n, 3):
            raise tensorio.FormatError(f"{f.name}: mesh shapes {left.shape}, {right.shape}")
        if joints.ndim != 3 or joints.shape[0] != 2 or joints.shape[2] != 3:
            raise tensorio.FormatError(f"{f.name}: joints shape {joints.shape}")
        out.append(Sample(image, left, right, joints))
    return out


# ---------------------------------------------------------------------------
# Combined objective and fitting
# ---------------------------------------------------------------------------


def combined_loss(left, right, sample: Sample, cfg: ModelConfig, hierarchy: SubmeshHierarchy,
                  regressor: JointRegressor):
    """Weighted vertex + joint + smooth loss averaged over both hands.

    Returns (loss, parts, d_left, d_right). The smooth term compares edge
    lengths against the ground-truth mesh.
    """
    w = cfg.loss_weights
    total = 0.0
    parts = {"vertex": 0.0, "joint": 0.0, "smooth": 0.0}
    grads = []
    for k, (pred, gt) in enumerate(((left, sample.left), (right, sample.right))):
        pred = _verts(pred)
        lv, gv = vertex_loss_grad(pred, gt)
        lj, gj = joint_loss_grad(pred, sample.joints[k], regressor)
        ls, gs = smooth_loss_grad(pred, hierarchy.full_edges, gt)
        parts["vertex"] += lv / 2
        parts["joint"] += lj / 2
        parts["smooth"] += ls / 2
        total += (w.vertex * lv + w.joint * lj + w.smooth * ls) / 2
        grads.append((w.vertex * gv + w.joint * gj + w.smooth * gs) / 2)
    return total, parts, grads[0], grads[1]


def _dataset_loss_and_grads(model, dataset, regressor, with_grads=True):
    from .model import pipeline_bwd, pipeline_fwd

    total, grads = 0.0, None
    for s in dataset:
        result, cache = pipeline_fwd(s.image, model)
        loss, _, dl, dr = combined_loss(result.left, result.right, s, model.cfg, model.hierarchy, regressor)
        total += loss / len(dataset)
        if with_grads:
            g = pipeline_bwd(dl / len(dataset), dr / len(dataset), model, cache)
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return total, grads


def sgd_fit(model, dataset: list[Sample], steps: int, lr: float, regressor: JointRegressor, momentum: float = 0.9,
            schedule: str = "cosine", clip_norm: float = 0.0) -> list[float]:
    """Full-batch SGD with momentum on the combined loss; returns the per-step loss.

    ``trace[k]`` is the loss before update k; the final entry is the loss after
    the last update, so the trace has ``steps + 1`` values.
    """
    if not dataset:
        raise ValueError("sgd_fit needs at least one sample")
    velocity = {n: np.zeros_like(model.params[n]) for n in model.params.names(trainable_only=True)}
    trace = []
    for step in range(steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _dataset_loss_and_grads(model, dataset, regressor)
        except NumericError as exc:
            raise NumericError(f"non-finite loss at step {step}: {exc}") from exc
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        trace.append(loss)
        rate = lr if schedule == "constant" else 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
        if clip_norm > 0:
            norm = np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in velocity))
            if norm > clip_norm:
                grads = {n: g * (clip_norm / norm) for n, g in grads.items()}
        for n, v in velocity.items():
            v *= momentum
            v -= rate * grads[n]
            model.params[n] = model.params[n] + v
        if step % 50 == 0:
            log.debug("step %d loss %.6f", step, loss)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            final, _ = _dataset_loss_and_grads(model, dataset, regressor, with_grads=False)
    except NumericError as exc:
        raise NumericError(f"non-finite loss at step {steps}: {exc}") from exc
    if not np.isfinite(final):
        raise NumericError(f"non-finite loss at step {steps}")
    trace.append(final)
    return trace
