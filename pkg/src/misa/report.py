"""Figures for training traces, memory plans and sweeps.

Figures are built on bare :class:`~matplotlib.figure.Figure` objects with the
Agg canvas, so concurrent sweep workers never share pyplot state. PNG metadata
is stripped to keep the files byte-reproducible.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from . import cost_model as cm

_PNG_METADATA = {"Software": None}


def _figure(ncols=1, width=6.0, height=3.6):
    fig = Figure(figsize=(width * ncols, height), dpi=100)
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    return path


def plot_trace(trace, out_dir: Path) -> list[Path]:
    """Loss and gradient-norm curves plus a heatmap of the sampling distribution."""
    out_dir = Path(out_dir)
    epochs = trace.column("epoch")
    fig, (ax_loss, ax_grad) = _figure(ncols=2)
    ax_loss.plot(epochs, trace.column("full_loss"), label="full loss")
    ax_loss.plot(epochs, trace.column("loss"), alpha=0.6, label="mean batch loss")
    ax_loss.set_xlabel("block epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    grad = np.maximum(trace.column("grad_sq_norm"), np.finfo(float).tiny)
    ax_grad.semilogy(epochs, grad)
    ax_grad.set_xlabel("block epoch")
    ax_grad.set_ylabel("full gradient squared norm")
    fig.suptitle(trace.method)
    paths = [_save(fig, out_dir / "loss.png")]

    fig, (ax,) = _figure(width=7.0)
    probs = np.stack([r.probs for r in trace.records]).T
    im = ax.imshow(probs, aspect="auto", origin="lower", interpolation="nearest",
                   extent=(-0.5, len(epochs) - 0.5, -0.5, probs.shape[0] - 0.5))
    fig.colorbar(im, ax=ax, label="sampling probability")
    ax.set_xlabel("block epoch")
    ax.set_ylabel("module id")
    paths.append(_save(fig, out_dir / "probs.png"))
    return paths


def plot_plan(shape: cm.ArchShape, report: dict, out_dir: Path, bytes_per_elem: int = 4) -> list[Path]:
    """Peak memory per method row, and MISA's peak as the trainable fraction varies."""
    out_dir = Path(out_dir)
    rows = report["memory"]
    labels = [r["method"] + (f" {r['target']}" if r["target"] else "") for r in rows]
    peaks = np.array([r["peak_elements"] for r in rows], dtype=float) * bytes_per_elem
    fig, (ax,) = _figure(width=9.0, height=4.5)
    colors = ["tab:red" if r["method"] in ("LayerwiseBCD", "MISA") else "tab:blue" for r in rows]
    ax.bar(range(len(rows)), peaks, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=75, fontsize=7)
    ax.set_ylabel("peak memory (bytes)")
    paths = [_save(fig, out_dir / "plan_memory.png")]

    grid = [Fraction(k, 100) for k in range(101)]
    misa = [float(cm.misa_peak(cm.replace(shape, delta=d))) * bytes_per_elem for d in grid]
    fig, (ax,) = _figure()
    ax.plot([float(d) for d in grid], misa, label="MISA")
    ax.axhline(cm.layerwise_peak(shape) * bytes_per_elem, color="tab:red", linestyle="--",
               label="layer-wise")
    thr = float(cm.delta_threshold_vs_layerwise(shape))
    if thr <= 1:
        ax.axvline(thr, color="grey", linestyle=":", label=f"threshold {thr:.4f}")
    ax.axvline(float(shape.delta), color="black", linewidth=0.8, label="requested delta")
    ax.set_xlabel("trainable fraction delta")
    ax.set_ylabel("peak memory (bytes)")
    ax.legend()
    paths.append(_save(fig, out_dir / "plan_delta.png"))
    return paths


def plot_sweep(rows: list[dict], out_dir: Path) -> list[Path]:
    """Final loss per grid point, grouped by strategy."""
    out_dir = Path(out_dir)
    fig, (ax,) = _figure(width=7.0)
    strategies = sorted({r["strategy"] for r in rows})
    for k, strategy in enumerate(strategies):
        losses = [r["final_loss"] for r in rows if r["strategy"] == strategy]
        ax.scatter(np.full(len(losses), k), losses, alpha=0.7)
        ax.hlines(np.median(losses), k - 0.3, k + 0.3, color="black")
    ax.set_xticks(range(len(strategies)))
    ax.set_xticklabels(strategies)
    ax.set_ylabel("final full loss")
    ax.set_title("sweep: final loss by strategy (bar = median)")
    return [_save(fig, out_dir / "sweep_final_loss.png")]
