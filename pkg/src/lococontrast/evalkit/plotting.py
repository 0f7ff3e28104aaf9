"""Figures written next to the JSON/CSV reports.

Heatmap PNGs are composed pixel-exactly in numpy (colormap from matplotlib)
so overlay positions can be checked against cell geometry; the summary
figures use ordinary matplotlib axes.
"""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..encoders import cell_center, grid_geometry  # noqa: E402
from .heatmap import Heatmap, combine_levels, upsample_level  # noqa: E402

CMAP = "jet"  # blue = low similarity, red = high
ORANGE = np.array([1.0, 0.55, 0.0])
WHITE = np.array([1.0, 1.0, 1.0])


def _normalize(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def _draw_rect(rgb: np.ndarray, x0: int, y0: int, x1: int, y1: int, color, thickness: int = 2):
    """Outline of the pixel rectangle [x0, x1) x [y0, y1), clipped to the image."""
    H, W = rgb.shape[:2]
    x0, x1 = max(0, x0), min(W, x1)
    y0, y1 = max(0, y0), min(H, y1)
    if x1 <= x0 or y1 <= y0:
        return
    t = thickness
    rgb[y0:min(y0 + t, y1), x0:x1] = color
    rgb[max(y1 - t, y0):y1, x0:x1] = color
    rgb[y0:y1, x0:min(x0 + t, x1)] = color
    rgb[y0:y1, max(x1 - t, x0):x1] = color


def _draw_marker(rgb: np.ndarray, x: float, y: float, radius: int = 1):
    H, W = rgb.shape[:2]
    cx, cy = int(round(x)), int(round(y))
    cx, cy = min(max(cx, 0), W - 1), min(max(cy, 0), H - 1)
    rgb[max(cy - radius, 0):cy + radius + 1, max(cx - radius, 0):cx + radius + 1] = WHITE
    return cx, cy


def compose_heatmap(values: np.ndarray, image: np.ndarray | None = None, crop=None,
                    marker=None, marker_box=None, image_weight: float = 0.3) -> np.ndarray:
    """H x W x 3 RGB: min-max normalized colormap, optional image blend and overlays.

    ``marker`` is an (x, y) point drawn as a small white square at its rounded
    position; ``marker_box`` an optional (x0, y0, x1, y1) white outline.
    """
    rgb = matplotlib.colormaps[CMAP](_normalize(values))[..., :3]
    if image is not None and image_weight > 0:
        rgb = (1 - image_weight) * rgb + image_weight * np.asarray(image, dtype=np.float64)[..., :3]
    rgb = np.ascontiguousarray(rgb)
    if marker_box is not None:
        _draw_rect(rgb, *(int(round(v)) for v in marker_box), WHITE, thickness=1)
    if crop is not None:
        _draw_rect(rgb, crop.a, crop.b, crop.a + crop.w, crop.b + crop.h, ORANGE)
    if marker is not None:
        _draw_marker(rgb, *marker)
    return np.clip(rgb, 0.0, 1.0)


def _save_rgb(rgb: np.ndarray, path: Path) -> Path:
    tmp = path.with_name(path.name + ".partial")
    plt.imsave(tmp, rgb, format="png")
    os.replace(tmp, path)
    return path


def _save_fig(fig, path, dpi: int) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    fig.savefig(tmp, dpi=dpi, format="png")
    plt.close(fig)
    os.replace(tmp, path)
    return path


def render_heatmap(heatmap: Heatmap, image: np.ndarray, out_dir, stem: str = "heatmap",
                   image_weight: float = 0.3) -> list[Path]:
    """One PNG per level plus ``<stem>_combined.png``; returns the paths in that order."""
    image = np.asarray(getattr(image, "pixels", image))
    if image.shape[0] != heatmap.height or image.shape[1] != heatmap.width:
        raise ValueError(f"image {image.shape[1]}x{image.shape[0]} does not match heatmap "
                         f"{heatmap.width}x{heatmap.height}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = grid_geometry(heatmap.width, heatmap.height)
    paths = []
    for level, values in enumerate(heatmap.levels):
        up = upsample_level(values, heatmap.strides[level], heatmap.width, heatmap.height)
        cell = heatmap.argmax[level]
        cx, cy = cell_center(grid, cell)
        s = heatmap.strides[level]
        rgb = compose_heatmap(up, image, heatmap.crop, marker=(cx, cy),
                              marker_box=(cell.col * s, cell.row * s, (cell.col + 1) * s,
                                          (cell.row + 1) * s),
                              image_weight=image_weight)
        paths.append(_save_rgb(rgb, out_dir / f"{stem}_level{level}.png"))
    combined = combine_levels(heatmap)
    flat = int(np.argmax(combined))
    peak = (flat % heatmap.width, flat // heatmap.width)
    rgb = compose_heatmap(combined, image, heatmap.crop, marker=peak, image_weight=image_weight)
    paths.append(_save_rgb(rgb, out_dir / f"{stem}_combined.png"))
    return paths


def plot_metrics(report, path) -> Path:
    """Grouped bars of SGA and RIGA per pyramid level, GAP-R annotated."""
    levels = [m.level for m in report.levels]
    x = np.arange(len(levels))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, [m.sga for m in report.levels], 0.4, label="SGA", color="C3")
    ax.bar(x + 0.2, [m.riga for m in report.levels], 0.4, label="RIGA", color="C0")
    for xi, m in zip(x, report.levels):
        label = "n/a" if m.gap_r is None else f"{m.gap_r:.2f}x"
        ax.annotate(label, (xi - 0.2, m.sga), ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, [f"level {l}" for l in levels])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction of images")
    ax.set_title(f"grid alignment, {report.mode} containment, N={report.n_images}")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save_fig(fig, path, dpi=120)


def plot_loss_curve(losses, path, window: int = 50) -> Path:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(losses, lw=0.5, color="0.7", label="step")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, len(losses)), smooth, color="C3", label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save_fig(fig, path, dpi=120)


def contact_sheet(query_crop: np.ndarray, images: list[np.ndarray], labels: list[str], path,
                  ncols: int = 5) -> Path:
    """Query crop followed by the ranked images in a grid."""
    n = len(images) + 1
    nrows = int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.4 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    axes.flat[0].imshow(np.clip(query_crop, 0, 1))
    axes.flat[0].set_title("query", fontsize=9, color="C1")
    for ax, img, label in zip(list(axes.flat)[1:], images, labels):
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(label, fontsize=7)
    fig.tight_layout()
    return _save_fig(fig, path, dpi=100)
