"""Figure and contact-sheet rendering for run reports.

Everything draws through the Agg backend and writes PNG files, so reports
render identically on headless machines. Figures are deliberately plain:
they exist to eyeball training behavior and bench aggregates, not for
publication.
"""

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import ParameterError
from .records import to_uint8

LOSS_TERMS = ("denoising", "pose", "background", "appearance", "total")


def _save(fig, out_path: str):
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def loss_curves(reports: list, out_path: str) -> str:
    """Per-term loss curves from a list of LossReport (or dicts)."""
    if not reports:
        raise ParameterError("no loss reports to plot")
    rows = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in reports]
    steps = [r.get("step", i + 1) for i, r in enumerate(rows)]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for term in ("denoising", "pose", "appearance"):
        axes[0].plot(steps, [r[term] for r in rows], label=term, linewidth=1.0)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    axes[0].set_title("bounded terms", fontsize=9)
    # background is a pixel sum and lives on its own scale; total follows it
    axes[1].plot(steps, [r["background"] for r in rows], label="background", linewidth=1.0)
    axes[1].plot(steps, [r["total"] for r in rows], label="total", linewidth=1.0)
    axes[1].set_yscale("log")
    axes[1].set_xlabel("step")
    axes[1].legend(fontsize=7)
    axes[1].set_title("sum-scale terms (log)", fontsize=9)
    fig.tight_layout()
    return _save(fig, out_path)


def bench_summary_figure(aggregates: dict, out_path: str) -> str:
    """Bar chart of the scalar aggregate metrics from a bench run."""
    items = [(k, v) for k, v in sorted(aggregates.items()) if isinstance(v, (int, float))]
    if not items:
        raise ParameterError("no scalar aggregates to plot")
    names = [k for k, _ in items]
    values = [float(v) for _, v in items]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(items)), 3.2))
    ax.bar(range(len(items)), values, color="#4878a8")
    ax.set_xticks(range(len(items)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
    ax.set_title("bench aggregates", fontsize=9)
    fig.tight_layout()
    return _save(fig, out_path)


def ablation_figure(axis_name: str, labels: list, series: dict, out_path: str) -> str:
    """Metric values across one ablation axis.

    ``series`` maps metric name -> list of per-cell values (None for failed
    cells, drawn as gaps).
    """
    if not labels or not series:
        raise ParameterError("ablation figure needs labels and at least one series")
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 3.2))
    xs = range(len(labels))
    for metric, values in sorted(series.items()):
        ys = [float("nan") if v is None else float(v) for v in values]
        ax.plot(xs, ys, marker="o", label=metric, linewidth=1.0)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(l) for l in labels], rotation=15, ha="right", fontsize=8)
    ax.set_xlabel(axis_name)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def attention_heatmaps(captures: list, grid: tuple, out_path: str) -> str:
    """Before/after heatmaps of the captured image->foreground slices.

    Each capture entry holds per-block 'text'/'id' sub-blocks whose rows are
    image tokens; rows are averaged over the foreground columns and reshaped
    onto the latent grid.
    """
    if not captures:
        raise ParameterError("no attention captures to plot")
    panels = []
    for cap in captures:
        for key in ("text", "id"):
            if key in cap:
                for phase in ("before", "after"):
                    mat = np.asarray(cap[key][phase], dtype=np.float64)
                    heat = mat.mean(axis=1).reshape(grid)
                    panels.append((f"block {cap['block']} {key} {phase}", heat))
    if not panels:
        raise ParameterError("captures contain no foreground slices")
    cols = min(4, len(panels))
    rows = math.ceil(len(panels) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, (title, heat) in zip(axes.flat, panels):
        ax.imshow(heat, cmap="magma")
        ax.set_title(title, fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, out_path)


def contact_sheet(images: list, out_path: str, cols: int = 4, pad: int = 2) -> str:
    """Tile float images into one PNG grid (row-major, white gutters)."""
    if not images:
        raise ParameterError("no images for contact sheet")
    arrays = [to_uint8(np.asarray(im)) for im in images]
    h = max(a.shape[0] for a in arrays)
    w = max(a.shape[1] for a in arrays)
    cols = max(1, min(cols, len(arrays)))
    rows = math.ceil(len(arrays) / cols)
    sheet = np.full(
        (rows * h + pad * (rows + 1), cols * w + pad * (cols + 1), 3), 255, dtype=np.uint8
    )
    for i, a in enumerate(arrays):
        r, c = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        sheet[y : y + a.shape[0], x : x + a.shape[1]] = a
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    Image.fromarray(sheet, mode="RGB").save(out_path, format="PNG")
    return out_path
