"""Report figures, rendered headless with fixed metadata so reruns are byte-identical."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .flops import ComplexityScan, FlopsReport  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_flops_breakdown(report: FlopsReport, path) -> Path:
    groups = report.by_group(2)
    names = list(groups)
    parts = {e["path"].split(".")[0] + "." + e["path"].split(".")[1]: e["part"] for e in report.entries}
    colors = ["tab:blue" if parts[n] == "image" else "tab:orange" for n in names]
    fig, ax = plt.subplots(figsize=(7, 0.28 * len(names) + 1.2))
    y = np.arange(len(names))
    ax.barh(y, [groups[n] / 1e6 for n in names], color=colors)
    ax.set_yticks(y, names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("MFLOPs")
    ax.set_title(f"image {report.image_part / 1e9:.3f} + pose {report.pose_part / 1e9:.3f} "
                 f"= {report.total / 1e9:.3f} GFLOPs")
    return _save(fig, Path(path))


def plot_complexity(scans: list[ComplexityScan], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for scan in scans:
        ax.loglog(scan.sizes, scan.flops, "o-", label=f"{scan.op} (slope {scan.exponent:.3f})")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("FLOPs")
    ax.legend(fontsize=7)
    return _save(fig, Path(path))


def plot_loss_trace(trace: list[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(np.arange(len(trace)), trace)
    ax.set_xlabel("step")
    ax.set_ylabel("combined loss")
    return _save(fig, Path(path))
