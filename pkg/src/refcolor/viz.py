"""Figure and heatmap rendering for report paths."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import cm  # noqa: E402


def heatmap_to_rgb(values: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    """Viridis-mapped RGB array (H, W, 3) uint8 from a scalar grid."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        side = int(round(np.sqrt(arr.size)))
        arr = arr.reshape(side, side)
    lo = arr.min() if vmin is None else vmin
    hi = arr.max() if vmax is None else vmax
    if hi - lo < 1e-12:
        norm = np.full_like(arr, 0.5)
    else:
        norm = (arr - lo) / (hi - lo)
    rgba = cm.get_cmap("viridis")(norm)
    return (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def save_heatmap_png(values: np.ndarray, path, upscale: int = 32):
    """Write a viridis heatmap PNG, nearest-upscaled for visibility."""
    from PIL import Image

    rgb = heatmap_to_rgb(values)
    rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)


def probe_figure(report, path):
    """Grouped bars of the probe metrics per checkpoint."""
    rows = report.ranked()
    labels = [r["strategy"] for r in rows]
    metrics = [("aligned_sketch_fidelity", "aligned fidelity"),
               ("aligned_palette_similarity", "aligned palette"),
               ("cross_sketch_fidelity", "cross fidelity"),
               ("cross_palette_similarity", "cross palette")]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(6, 2 + 1.6 * len(rows)), 4))
    for i, (key, label) in enumerate(metrics):
        ax.bar(x + i * width, [r[key] for r in rows], width, label=label)
    ax.set_xticks(x + 1.5 * width)
    ax.set_xticklabels(labels, rotation=15, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.set_title("strategy probe")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curve_figure(records: list[dict], path):
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in records]
    losses = [r["loss"] for r in records]
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
