"""Heat-map overlays of activation maps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .activation import ActivationMap  # noqa: E402
from .raster import save_image  # noqa: E402

CMAP = "jet"


def heat_colors(p, cmap=CMAP):
    """(H, W) activations in [0, 1] -> (H, W, 3) colormap RGB."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    return matplotlib.colormaps[cmap](p)[..., :3]


def blend(image, p, alpha=0.5, cmap=CMAP):
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != np.shape(p):
        raise ValueError(f"activation shape {np.shape(p)} does not match image {image.shape[:2]}")
    return (1.0 - alpha) * image + alpha * heat_colors(p, cmap)


def _slug(name):
    return "".join(ch if ch.isalnum() else "_" for ch in str(name)) or "class"


def write_legend(entries, out_path, cmap=CMAP):
    """Legend strip: colorbar plus, per class, its name and corpus texts."""
    lines = []
    for name, corpus in entries:
        lines.append(f"{name}")
        if corpus is not None:
            lines.append("  FG: " + "; ".join(dict.fromkeys(corpus.fg_texts)))
            lines.append("  BG: " + "; ".join(dict.fromkeys(corpus.bg_texts)))
    height = 0.6 + 0.22 * len(lines)
    fig = plt.figure(figsize=(8, height), dpi=80)
    bar = fig.add_axes([0.05, 1 - 0.45 / height, 0.9, 0.25 / height])
    bar.imshow(np.linspace(0, 1, 256)[None], aspect="auto", cmap=cmap, extent=(0, 1, 0, 1))
    bar.set_yticks([])
    bar.set_xticks([0, 0.5, 1])
    fig.text(0.05, 1 - 0.7 / height, "\n".join(lines), va="top", family="monospace", fontsize=8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def export_overlay(image, maps: ActivationMap, out_path, class_names=None, corpora=None, alpha=0.5, cmap=CMAP):
    """Write one overlay PNG per class plus ``<stem>_legend.png``.

    Overlay files are named ``<stem>_<class><suffix>`` and have the image's
    dimensions. ``class_names`` maps class id to name; ``corpora`` maps
    class id to the corpus shown in the legend. Returns the written paths,
    legend last.
    """
    image = np.asarray(image)
    out_path = Path(out_path)
    suffix = out_path.suffix or ".png"
    names = class_names or {}
    corpora = corpora or {}
    written, entries = [], []
    for cid in maps.class_ids:
        name = names.get(cid, str(cid)) if isinstance(names, dict) else names[cid]
        path = out_path.with_name(f"{out_path.stem}_{_slug(name)}{suffix}")
        save_image(blend(image, maps.plane(cid), alpha, cmap), path)
        written.append(path)
        entries.append((name, corpora.get(cid)))
    written.append(write_legend(entries, out_path.with_name(f"{out_path.stem}_legend.png"), cmap))
    return written
