"""Static figures: metric-vs-sigma curves and grids of synthesized outliers."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .dataset import load_dataset  # noqa: E402
from .synthesis import ANNOTATION_FILE, load_rgb  # noqa: E402


def sigma_sweep_plot(reports, sigmas, path) -> Path:
    xs = np.asarray(sigmas, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for key, style in (("fpr95", "o-"), ("auroc", "s-"), ("map", "^-")):
        ax.plot(xs, [getattr(r, key) for r in reports], style, label={
            "fpr95": "FPR95 (%)", "auroc": "AUROC (%)", "map": "mAP (ID) (%)"}[key])
    ax.set_xscale("log")
    ax.set_xlabel("sigma")
    ax.set_ylabel("%")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def outlier_grid(manifest, synth_dir, path, max_items: int = 8) -> Path | None:
    """Synthesized images with their replaced boxes outlined, first ``max_items`` entries."""
    entries = list(manifest.entries)[:max_items]
    if not entries:
        return None
    synth_dir = Path(synth_dir)
    ds = load_dataset(synth_dir / ANNOTATION_FILE)
    cols = min(4, len(entries))
    rows = -(-len(entries) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, e in zip(axes.flat, entries):
        rec = ds.image(e.output_image_id)
        ax.imshow(load_rgb(ds.image_path(rec)))
        anns = ds.annotations_for(rec.id)
        for k in e.replaced_boxes:
            b = anns[k].box
            ax.add_patch(Rectangle((b.x - 0.5, b.y - 0.5), b.w, b.h, fill=False, ec="red", lw=1.2))
        ax.set_title(", ".join(e.replaced_classes), fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
