"""Command-line entry point: ``lwahand <command> [options]``.

Exit codes: 0 success, 2 validation error (bad config, file, shape or
topology), 3 numeric failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, tensorio
from .config import FORMAT_VERSION, ModelConfig, load_config, toy_config
from .flops import complexity_scan, count_flops, parse_sweep
from .gradcheck import check_components, check_model
from .losses import (
    EvalProtocol,
    evaluate,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
    sgd_fit,
    synthetic_regressor,
)
from .mesh import HandMesh, save_topology, synthesize_topology
from .model import Model, pipeline_fwd, zero_params
from .numerics import NumericError

log = logging.getLogger("lwahand")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

# sequence-length sweeps reported by `flops --sweep tokens` and `report`
SCAN_OPS = ("separable_self_attention", "cross_hand_attention")


class CommandFailed(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj: dict) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class RunManifest:
    """Inputs and output digests of one command; written as manifest.json."""

    def __init__(self, command: str, cfg: ModelConfig, seed: int, argv: list[str]):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.argv = argv
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.outputs: dict[str, str] = {}

    def add(self, path: Path) -> Path:
        self.outputs[path.name] = _digest(path)
        return path

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "tool": "lwahand",
            "version": __version__,
            "command": self.command,
            "argv": self.argv,
            "config_sha256": self.cfg.digest(),
            "seed": self.seed,
            "started_utc": self.started,
            "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "outputs": dict(sorted(self.outputs.items())),
        }

    def write(self, out: Path) -> Path:
        return _write_json(out / "manifest.json", self.to_dict())


def _config(args, toy_default: bool = False) -> ModelConfig:
    if args.config:
        return load_config(args.config)
    return toy_config() if toy_default else load_config()


def _model(cfg: ModelConfig, args) -> Model:
    model = Model.create(cfg, seed=args.seed)
    if getattr(args, "weights", None):
        model.load_weights(args.weights)
    return model


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, obj: dict, table: str) -> None:
    sys.stdout.write(table if args.format == "table" else json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _seed(args, cfg: ModelConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_forward(args) -> int:
    cfg = _config(args)
    model = _model(cfg, args)
    image = tensorio.load(args.image)
    if image.shape != (3, cfg.image_size, cfg.image_size):
        raise tensorio.FormatError(f"{args.image}: image shape {image.shape}, expected "
                                   f"{(3, cfg.image_size, cfg.image_size)}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise tensorio.FormatError(f"{args.image}: pixel values must lie in [0, 1]")
    result, _ = pipeline_fwd(image, model)
    out = _out_dir(args)
    manifest = RunManifest("forward", cfg, _seed(args, cfg), args.argv)
    for hand, mesh in (("left", result.left), ("right", result.right)):
        path = out / f"mesh_{hand}.lwat"
        tensorio.save(path, mesh.vertices)
        manifest.add(path)
    summary = {"format_version": FORMAT_VERSION, **result.diagnostics()}
    manifest.add(_write_json(out / "forward.json", summary))
    manifest.write(out)
    counts = " -> ".join(str(c) for c in summary["level_counts"])
    _emit(args, summary, f"levels {counts}\nbridge attention max row-sum deviation "
                         f"{max(summary['bridge_attention_row_sum_max_dev']):.2e}\n")
    return EXIT_OK


def _scans(sizes, dim):
    return [complexity_scan(op, sizes, dim=dim) for op in SCAN_OPS]


def cmd_flops(args) -> int:
    cfg = _config(args)
    cfg.flops.aux_heads = cfg.flops.aux_heads or args.aux_heads
    report = count_flops(cfg)
    obj = report.to_dict()
    table = report.table()
    if args.sweep:
        var, rng = args.sweep
        if var != "tokens":
            raise CommandFailed(f"--sweep: only 'tokens' can be swept, got {var!r}", EXIT_VALIDATION)
        scans = _scans(parse_sweep(rng), args.scan_dim)
        obj["scans"] = [s.to_dict() for s in scans]
        table += "".join(f"{s.op:<32} exponent {s.exponent:.4f}\n" for s in scans)
    if args.out:
        out = _out_dir(args)
        manifest = RunManifest("flops", cfg, _seed(args, cfg), args.argv)
        manifest.add(_write_json(out / "flops.json", obj))
        (out / "flops.txt").write_text(table)
        manifest.add(out / "flops.txt")
        manifest.write(out)
    _emit(args, obj, table)
    return EXIT_OK


def cmd_scan(args) -> int:
    scan = complexity_scan(args.op, parse_sweep(args.sizes), dim=args.scan_dim)
    obj = scan.to_dict()
    lines = [f"{'size':>8} {'flops':>14}"] + [f"{s:>8} {f:>14}" for s, f in zip(scan.sizes, scan.flops)]
    lines.append(f"exponent {scan.exponent:.4f}")
    if args.out:
        out = _out_dir(args)
        cfg = _config(args)
        manifest = RunManifest("scan", cfg, _seed(args, cfg), args.argv)
        manifest.add(_write_json(out / f"scan_{args.op}.json", obj))
        manifest.write(out)
    _emit(args, obj, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args, toy_default=True)
    seed = _seed(args, cfg)
    fault = None
    if args.corrupt:
        def fault(grads, name=args.corrupt):
            if name not in grads:
                raise CommandFailed(f"--corrupt: unknown parameter group {name!r}", EXIT_VALIDATION)
            grads[name] = grads[name] * 1.01 + 1e-3

    report = check_model(cfg, seed, fault=fault)
    obj = report.to_dict()
    table = report.table()
    if args.components:
        comp = check_components(seed)
        obj["components"] = comp.to_dict()
        table += "\n" + comp.table()
        ok = report.passed and comp.passed
    else:
        ok = report.passed
    obj["passed"] = ok
    if args.out:
        out = _out_dir(args)
        manifest = RunManifest("gradcheck", cfg, seed, args.argv)
        manifest.add(_write_json(out / "gradcheck.json", obj))
        manifest.write(out)
    _emit(args, obj, table)
    return EXIT_OK if ok else EXIT_NUMERIC


def _fit(cfg: ModelConfig, args, dataset, steps: int):
    model = _model(cfg, args)
    reg = synthetic_regressor(model.hierarchy.template, cfg.eval.num_joints)
    opt = cfg.optimizer
    lr = opt.lr if args.lr is None else args.lr
    trace = sgd_fit(model, dataset, steps, lr, reg, opt.momentum, opt.schedule, opt.clip_norm)
    protocol = EvalProtocol.from_config(cfg.eval)
    metrics = []
    for s in dataset:
        result, _ = pipeline_fwd(s.image, model)
        gt = (HandMesh(s.left, "left", s.joints[0]), HandMesh(s.right, "right", s.joints[1]))
        metrics.append(evaluate((result.left, result.right), gt, protocol, reg))
    final = {k: float(np.mean([m[k] for m in metrics])) for k in metrics[0]}
    return model, trace, final


def _dataset(cfg: ModelConfig, args, hierarchy):
    if args.data:
        return load_dataset(args.data, cfg.image_size, hierarchy.full_n)
    reg = synthetic_regressor(hierarchy.template, cfg.eval.num_joints)
    return make_synthetic_dataset(cfg, hierarchy, reg, args.samples, seed=_seed(args, cfg) + 1)


def cmd_overfit(args) -> int:
    cfg = _config(args, toy_default=True)
    seed = _seed(args, cfg)
    steps = cfg.optimizer.steps if args.steps is None else args.steps
    probe = Model.create(cfg, seed=seed)
    dataset = _dataset(cfg, args, probe.hierarchy)
    _, trace, final = _fit(cfg, args, dataset, steps)
    obj = {
        "format_version": FORMAT_VERSION,
        "samples": len(dataset),
        "steps": steps,
        "initial_loss": trace[0],
        "final_loss": trace[-1],
        "ratio": trace[-1] / trace[0] if trace[0] else 0.0,
        "trace": trace,
        "metrics": final,
    }
    out = _out_dir(args)
    manifest = RunManifest("overfit", cfg, seed, args.argv)
    manifest.add(_write_json(out / "overfit.json", obj))
    manifest.write(out)
    _emit(args, obj, f"loss {trace[0]:.4f} -> {trace[-1]:.4f} (ratio {obj['ratio']:.3e}) over {steps} steps\n"
                     f"MPJPE {final['mpjpe_mm']:.3f} mm  MPVPE {final['mpvpe_mm']:.3f} mm\n")
    return EXIT_OK


def cmd_make_topology(args) -> int:
    seed = 0 if args.seed is None else args.seed
    path = Path(args.out or "topology.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_topology(synthesize_topology(seed), path)
    sys.stdout.write(f"{path}\n")
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    cfg = _config(args, toy_default=True)
    h = Model.create(cfg, seed=_seed(args, cfg)).hierarchy
    reg = synthetic_regressor(h.template, cfg.eval.num_joints)
    out = _out_dir(args)
    save_dataset(make_synthetic_dataset(cfg, h, reg, args.samples, seed=_seed(args, cfg) + 1), out)
    sys.stdout.write(f"{args.samples} samples in {out}\n")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    cfg = _config(args)
    model = Model.create(cfg, seed=args.seed)
    if args.zero:
        model.params = zero_params(model.params)
    path = Path(args.out or "weights.lwat")
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save_weights(path)
    sys.stdout.write(f"{path}\n")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_complexity, plot_flops_breakdown, plot_loss_trace

    cfg = _config(args)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    manifest = RunManifest("report", cfg, seed, args.argv)
    report = count_flops(cfg)
    scans = _scans(parse_sweep("64..512"), args.scan_dim)
    flops_obj = {**report.to_dict(), "scans": [s.to_dict() for s in scans]}
    manifest.add(_write_json(out / "flops.json", flops_obj))
    table = report.table() + "".join(f"{s.op:<32} exponent {s.exponent:.4f}\n" for s in scans)
    (out / "flops.txt").write_text(table)
    manifest.add(out / "flops.txt")
    manifest.add(plot_flops_breakdown(report, out / "flops_breakdown.png"))
    manifest.add(plot_complexity(scans, out / "complexity.png"))
    if args.overfit_steps > 0:
        toy = toy_config()
        probe = Model.create(toy, seed=seed)
        reg = synthetic_regressor(probe.hierarchy.template, toy.eval.num_joints)
        dataset = make_synthetic_dataset(toy, probe.hierarchy, reg, args.samples, seed=seed + 1)
        fit_args = argparse.Namespace(seed=seed, weights=None, lr=None, argv=args.argv)
        _, trace, final = _fit(toy, fit_args, dataset, args.overfit_steps)
        manifest.add(_write_json(out / "overfit.json", {"format_version": FORMAT_VERSION, "trace": trace,
                                                          "metrics": final}))
        manifest.add(plot_loss_trace(trace, out / "loss_trace.png"))
        table += f"overfit {len(dataset)} samples: loss {trace[0]:.4f} -> {trace[-1]:.4f}\n"
    (out / "report.txt").write_text(table)
    manifest.add(out / "report.txt")
    manifest.write(out)
    _emit(args, flops_obj, table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="model config JSON (defaults are fully resolved when omitted)")
    common.add_argument("--weights", help="LWAT weight bundle")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", help="output directory (file for make-topology/init-weights)")
    common.add_argument("--format", choices=("json", "table"), default="table")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lwahand", description="Two-hand mesh regression toolkit")
    p.add_argument("--version", action="version", version=f"lwahand {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("forward", parents=[common], help="image -> two 778x3 meshes")
    s.add_argument("--image", required=True, help="LWAT tensor 3xSxS with values in [0, 1]")
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("flops", parents=[common], help="static FLOPs report")
    s.add_argument("--sweep", nargs=2, metavar=("VAR", "RANGE"), help="e.g. --sweep tokens 64..512")
    s.add_argument("--scan-dim", type=int, default=4, help="feature width held fixed during sweeps")
    s.add_argument("--aux-heads", action="store_true", help="include heatmap/segmentation head stubs")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("scan", parents=[common], help="complexity sweep of one operator")
    s.add_argument("--op", default="separable_self_attention")
    s.add_argument("--sizes", default="64..512")
    s.add_argument("--scan-dim", type=int, default=4)
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check (toy config)")
    s.add_argument("--components", action="store_true", help="also check individual operators")
    s.add_argument("--corrupt", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("overfit", parents=[common], help="fit a few synthetic samples (toy config)")
    s.add_argument("--data", help="directory of sample_*.lwat bundles")
    s.add_argument("--samples", type=int, default=1, help="synthesized when --data is absent")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.set_defaults(func=cmd_overfit)

    s = sub.add_parser("make-topology", parents=[common], help="write a synthetic topology JSON")
    s.set_defaults(func=cmd_make_topology)

    s = sub.add_parser("make-dataset", parents=[common], help="write synthetic training samples")
    s.add_argument("--samples", type=int, default=4)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("init-weights", parents=[common], help="write seeded (or zero) weights")
    s.add_argument("--zero", action="store_true")
    s.set_defaults(func=cmd_init_weights)

    s = sub.add_parser("report", parents=[common], help="FLOPs, scans, a short fit and figures")
    s.add_argument("--scan-dim", type=int, default=4)
    s.add_argument("--overfit-steps", type=int, default=100)
    s.add_argument("--samples", type=int, default=1)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
