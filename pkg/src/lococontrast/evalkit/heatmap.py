"""Per-level similarity maps and their combination at image resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cropper import CropSpec
from ..encoders import BASE_STRIDE, CellIndex


@dataclass
class Heatmap:
    levels: list[np.ndarray]  # rows x cols cosine similarities per level
    strides: list[int]
    argmax: list[CellIndex]
    width: int
    height: int
    crop: CropSpec | None = None

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def argmax_cell(level: int, values: np.ndarray) -> CellIndex:
    # np.argmax returns the first maximum in row-major order, i.e. the smallest (row, col)
    flat = int(np.argmax(values))
    return CellIndex(level, flat // values.shape[1], flat % values.shape[1])


def similarity_heatmap(z, feature_maps, width: int | None = None, height: int | None = None,
                       crop: CropSpec | None = None) -> Heatmap:
    """Cosine similarity between crop embedding ``z`` and every cell of every level."""
    z = np.asarray(z, dtype=np.float64)
    levels, strides, argmaxes = [], [], []
    for level, fmap in enumerate(feature_maps):
        values = np.asarray(fmap.values, dtype=np.float64) @ z
        levels.append(np.clip(values, -1.0, 1.0))
        strides.append(int(getattr(fmap, "stride", BASE_STRIDE * 2 ** level)))
        argmaxes.append(argmax_cell(getattr(fmap, "level", level), levels[-1]))
    if width is None or height is None:
        rows, cols = levels[0].shape
        width = width or cols * strides[0]
        height = height or rows * strides[0]
    return Heatmap(levels, strides, argmaxes, int(width), int(height), crop)


def _interp_matrix(n_out: int, n_cells: int, stride: int) -> np.ndarray:
    """n_out x n_cells linear-interpolation weights, cell values anchored at their centers.

    Pixel p samples position p + 0.5; positions beyond the first/last center
    clamp to the edge value.
    """
    u = (np.arange(n_out) + 0.5) / stride - 0.5
    u = np.clip(u, 0.0, n_cells - 1)
    lo = np.floor(u).astype(int)
    hi = np.minimum(lo + 1, n_cells - 1)
    frac = u - lo
    weights = np.zeros((n_out, n_cells))
    rows = np.arange(n_out)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def upsample_level(values: np.ndarray, stride: int, width: int, height: int) -> np.ndarray:
    wy = _interp_matrix(height, values.shape[0], stride)
    wx = _interp_matrix(width, values.shape[1], stride)
    return wy @ values @ wx.T


def combine_levels(heatmap: Heatmap, levels: list[int] | None = None) -> np.ndarray:
    """Equal-weight mean of the bilinearly upsampled level maps, H x W."""
    chosen = range(heatmap.num_levels) if levels is None else levels
    ups = [upsample_level(heatmap.levels[l], heatmap.strides[l], heatmap.width, heatmap.height)
           for l in chosen]
    if not ups:
        raise ValueError("heatmap has no levels")
    return np.mean(ups, axis=0)
