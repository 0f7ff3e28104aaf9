"""Positive cells, intra-image anchor negatives, and batch assembly."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .cropper import AugRecord, CropSpec, apply_flips, extract_crop, map_point, sample_crop, sample_flips
from .dataset import ImageSample, pad_batch
from .encoders import CellIndex, PyramidGrid, grid_geometry
from .errors import ConfigError
from .loss import PairBatch


class AnchorShortfallWarning(UserWarning):
    """Fewer candidate cells than requested anchors; all candidates were used."""


def select_positive(grid: PyramidGrid, level: int, x: float, y: float) -> CellIndex:
    """Cell whose center is nearest (x, y); ties go to the smallest (row, col).

    Distance separates over axes on a regular grid, so the nearest column and
    row can be found independently: centers sit at (k + 0.5) * s, and
    ceil(x / s - 1) picks the nearest k with exact halfway points rounding down.
    """
    rows, cols = grid.dims[level]
    s = grid.strides[level]
    col = min(max(math.ceil(x / s - 1), 0), cols - 1)
    row = min(max(math.ceil(y / s - 1), 0), rows - 1)
    return CellIndex(level, row, col)


def valid_cells(grid: PyramidGrid, level: int, extent: tuple[int, int] | None = None) -> np.ndarray:
    """Row-major flat indices of cells whose centers lie inside ``extent`` (W, H).

    The first cell is always kept so a level never ends up empty.
    """
    rows, cols = grid.dims[level]
    s = grid.strides[level]
    if extent is None:
        return np.arange(rows * cols)
    W, H = extent
    n_cols = max(1, min(cols, math.ceil(W / s - 0.5)))
    n_rows = max(1, min(rows, math.ceil(H / s - 0.5)))
    r, c = np.mgrid[0:n_rows, 0:n_cols]
    return (r * cols + c).ravel()


def sample_anchor_negatives(grid: PyramidGrid, level: int, positive: CellIndex, count: int,
                            rng: np.random.Generator,
                            extent: tuple[int, int] | None = None) -> list[CellIndex]:
    """``count`` distinct non-positive cells, uniformly without replacement."""
    if count < 0:
        raise ConfigError("anchor count must be >= 0")
    cols = grid.dims[level][1]
    candidates = valid_cells(grid, level, extent)
    candidates = candidates[candidates != positive.row * cols + positive.col]
    if count == 0:
        return []
    if len(candidates) <= count:
        if len(candidates) < count:
            warnings.warn(f"level {level}: only {len(candidates)} anchor cells available, "
                          f"{count} requested", AnchorShortfallWarning, stacklevel=2)
        chosen = candidates
    else:
        chosen = rng.choice(candidates, size=count, replace=False)
    return [CellIndex(level, int(i) // cols, int(i) % cols) for i in chosen]


# ---------------------------------------------------------------------------
# views and batches


@dataclass
class TrainingView:
    """One image prepared for both pipelines."""

    image_id: str
    crop: np.ndarray  # h x w x 3, pipeline-1 flips applied
    full: np.ndarray  # H x W x 3, pipeline-2 flips applied
    crop_spec: CropSpec
    crop_aug: AugRecord
    full_aug: AugRecord

    @property
    def target(self) -> tuple[float, float]:
        """Crop center in the coordinates of the (flipped) full image."""
        return map_point(self.full_aug, *self.crop_spec.center)

    @property
    def size(self) -> tuple[int, int]:
        return self.full_aug.width, self.full_aug.height


def make_view(image: ImageSample, rng: np.random.Generator, augment: bool = True,
              crop: CropSpec | None = None) -> TrainingView:
    """Crop on the un-augmented image, then flip the crop and the full image independently."""
    W, H = image.width, image.height
    box = crop if crop is not None else sample_crop(W, H, rng)
    patch = extract_crop(image, box).pixels
    if augment:
        crop_aug = sample_flips(rng, box.w, box.h)
        full_aug = sample_flips(rng, W, H)
    else:
        crop_aug = AugRecord(False, False, box.w, box.h)
        full_aug = AugRecord(False, False, W, H)
    return TrainingView(
        image_id=image.id,
        crop=apply_flips(patch, crop_aug),
        full=apply_flips(image.pixels, full_aug),
        crop_spec=box,
        crop_aug=crop_aug,
        full_aug=full_aug,
    )


@dataclass
class LevelAssignment:
    positive: CellIndex
    anchors: list[CellIndex]


@dataclass
class AssembledBatch:
    levels: list[PairBatch]
    assignments: list[dict[int, LevelAssignment]]  # per image, keyed by level
    targets: list[tuple[float, float]]
    grid: PyramidGrid
    extents: list[tuple[int, int]] = field(default_factory=list)

    @property
    def z_i(self) -> torch.Tensor:
        return self.levels[0].z_i


def resolve_anchor_count(value, batch_size: int) -> int:
    """Anchors per image: an int, or "batch" / "half-batch"."""
    if value == "batch":
        return batch_size
    if value == "half-batch":
        return max(batch_size // 2, 0)
    count = int(value)
    if count < 0:
        raise ConfigError("anchors_per_image must be >= 0")
    return count


def resolve_levels(value, num_levels: int = 5) -> list[int]:
    if value in (None, "all"):
        return list(range(num_levels))
    if isinstance(value, (int, np.integer)):
        value = [value]
    if isinstance(value, str):
        value = [int(s) for s in value.split(",")]
    levels = sorted({int(l) for l in value})
    if not levels or levels[0] < 0 or levels[-1] >= num_levels:
        raise ConfigError(f"levels must be 'all' or a subset of 0..{num_levels - 1}")
    return levels


def assemble_pair_batch(views: list[TrainingView], crop_encoder, pyramid_encoder,
                        rngs: list[np.random.Generator], anchors_per_image: int = 10,
                        levels="all") -> AssembledBatch:
    """Run both pipelines on ``views`` and gather positives and anchors per level.

    ``rngs`` holds one generator per image, so anchor draws for an image do
    not depend on the other images in the batch.
    """
    if not views:
        raise ConfigError("batch size must be >= 1")
    if len(rngs) != len(views):
        raise ConfigError("need one rng per view")
    level_ids = resolve_levels(levels)
    dtype = next(pyramid_encoder.parameters()).dtype

    crops = [torch.from_numpy(np.ascontiguousarray(v.crop.transpose(2, 0, 1))).to(dtype)
             for v in views]
    z_i = crop_encoder.encode_many(crops)

    padded = pad_batch([v.full for v in views])
    maps = pyramid_encoder(padded.to_tensor().to(dtype))
    grid = grid_geometry(padded.width, padded.height)

    assignments: list[dict[int, LevelAssignment]] = [dict() for _ in views]
    targets = [v.target for v in views]
    extents = list(padded.original_sizes)
    level_batches = []
    for level in level_ids:
        fmap = maps[level]  # N x d x rows x cols
        pos_rows, pos_cols, anchor_lists = [], [], []
        for k, view in enumerate(views):
            pos = select_positive(grid, level, *targets[k])
            anchors = sample_anchor_negatives(grid, level, pos, anchors_per_image, rngs[k],
                                              extent=extents[k])
            assignments[k][level] = LevelAssignment(pos, anchors)
            pos_rows.append(pos.row)
            pos_cols.append(pos.col)
            anchor_lists.append(anchors)

        idx = torch.arange(len(views))
        z_j = fmap[idx, :, torch.tensor(pos_rows), torch.tensor(pos_cols)]  # N x d
        n_anchor = max((len(a) for a in anchor_lists), default=0)
        d = fmap.shape[1]
        if n_anchor:
            rows = torch.zeros(len(views), n_anchor, dtype=torch.long)
            cols = torch.zeros(len(views), n_anchor, dtype=torch.long)
            mask = torch.zeros(len(views), n_anchor, dtype=torch.bool)
            for k, anchors in enumerate(anchor_lists):
                for a, cell in enumerate(anchors):
                    rows[k, a], cols[k, a], mask[k, a] = cell.row, cell.col, True
            # padded slots point at the positive cell; the mask hides them from the loss
            for k in range(len(views)):
                rows[k, ~mask[k]] = pos_rows[k]
                cols[k, ~mask[k]] = pos_cols[k]
            z_a = fmap[idx[:, None], :, rows, cols]  # N x A x d
        else:
            mask = torch.zeros(len(views), 0, dtype=torch.bool)
            z_a = fmap.new_zeros((len(views), 0, d))
        level_batches.append(PairBatch(z_i=z_i, z_j=z_j, z_a=z_a,
                                       anchor_mask=None if bool(mask.all()) else mask,
                                       level=level))
    return AssembledBatch(levels=level_batches, assignments=assignments, targets=targets,
                          grid=grid, extents=extents)
