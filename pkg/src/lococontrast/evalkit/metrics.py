"""Zero-shot localization metrics: SGA, RIGA and their ratio GAP-R.

For each evaluation image one crop is sampled and treated as the bounding
box. Per pyramid level, SGI counts images whose most-similar cell is
localized in that box and RIGI counts the same test for a uniformly random
cell. SGA = SGI / N, RIGA = RIGI / N, GAP-R = SGA / RIGA.

Two containment tests are available: ``center`` (cell center inside the box,
the default) and ``full-cell`` (the whole stride-sized cell square inside).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..cropper import CropSpec, extract_crop, sample_crop
from ..dataset import DatasetManifest
from ..encoders import CellIndex, PyramidGrid, cell_center, encode_crop, encode_pyramid, grid_geometry
from ..errors import ConfigError, EmptyDataset
from ..pairing import valid_cells
from .heatmap import similarity_heatmap

logger = logging.getLogger(__name__)

MODES = ("center", "full-cell")


def is_localized(grid: PyramidGrid, cell: CellIndex, crop: CropSpec, mode: str = "center") -> bool:
    if mode == "center":
        return crop.contains_point(*cell_center(grid, cell))
    if mode == "full-cell":
        s = grid.strides[cell.level]
        return crop.contains_box(cell.col * s, cell.row * s, (cell.col + 1) * s, (cell.row + 1) * s)
    raise ConfigError(f"unknown containment mode {mode!r}")


def random_cell(grid: PyramidGrid, level: int, rng: np.random.Generator,
                extent: tuple[int, int] | None = None) -> CellIndex:
    """Uniform draw over the level's cells whose centers fall inside ``extent``."""
    cells = valid_cells(grid, level, extent)
    flat = int(cells[rng.integers(len(cells))])
    cols = grid.dims[level][1]
    return CellIndex(level, flat // cols, flat % cols)


@dataclass
class LocalizationRecord:
    """What one evaluation image contributes: its box, and per level the argmax and random cells."""

    image_id: str
    crop: CropSpec
    grid: PyramidGrid
    argmax: list[CellIndex]
    random: list[CellIndex]


@dataclass
class LevelMetrics:
    level: int
    sga: float
    riga: float
    gap_r: float | None
    sgi: int
    rigi: int
    n: int


@dataclass
class MetricsReport:
    levels: list[LevelMetrics]
    n_images: int
    mode: str
    seed: int
    provenance: dict = field(default_factory=dict)

    def level(self, level: int) -> LevelMetrics:
        for m in self.levels:
            if m.level == level:
                return m
        raise KeyError(level)

    def to_json(self) -> dict:
        return {
            "n_images": self.n_images,
            "mode": self.mode,
            "seed": self.seed,
            "levels": [asdict(m) for m in self.levels],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict) -> MetricsReport:
        return cls(levels=[LevelMetrics(**m) for m in d["levels"]], n_images=d["n_images"],
                   mode=d["mode"], seed=d["seed"], provenance=d.get("provenance", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["level", "SGA", "RIGA", "GAP-R", "SGI", "RIGI", "N"])
        for m in self.levels:
            writer.writerow([m.level, repr(m.sga), repr(m.riga),
                             "NA" if m.gap_r is None else repr(m.gap_r), m.sgi, m.rigi, m.n])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for suffix, text in ((".json", json.dumps(self.to_json(), indent=2, sort_keys=True)),
                             (".csv", self.to_csv())):
            path = out_dir / f"{stem}{suffix}"
            tmp = path.with_name(path.name + ".partial")
            tmp.write_text(text)
            os.replace(tmp, path)
            paths.append(path)
        return paths[0], paths[1]


def tally(records: list[LocalizationRecord], mode: str = "center", seed: int = 0,
          provenance: dict | None = None) -> MetricsReport:
    if mode not in MODES:
        raise ConfigError(f"unknown containment mode {mode!r}")
    if not records:
        raise EmptyDataset("no evaluation records")
    n = len(records)
    num_levels = len(records[0].argmax)
    levels = []
    for level in range(num_levels):
        sgi = sum(is_localized(r.grid, r.argmax[level], r.crop, mode) for r in records)
        rigi = sum(is_localized(r.grid, r.random[level], r.crop, mode) for r in records)
        sga, riga = sgi / n, rigi / n
        levels.append(LevelMetrics(level=level, sga=sga, riga=riga,
                                   gap_r=sga / riga if riga > 0 else None,
                                   sgi=int(sgi), rigi=int(rigi), n=n))
    return MetricsReport(levels=levels, n_images=n, mode=mode, seed=seed,
                         provenance=provenance or {})


# ---------------------------------------------------------------------------
# embedding providers


class ModelEmbedder:
    """Adapts a (crop_encoder, pyramid_encoder) pair to the provider interface."""

    def __init__(self, crop_encoder, pyramid_encoder):
        self.crop_encoder = crop_encoder.eval()
        self.pyramid_encoder = pyramid_encoder.eval()

    def crop(self, pixels: np.ndarray) -> np.ndarray:
        return encode_crop(self.crop_encoder, pixels)

    def pyramid(self, pixels: np.ndarray):
        return encode_pyramid(self.pyramid_encoder, pixels)


def image_stream(seed: int, image_id: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(image_id.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, 3, key]))


def localize_image(embedder, image, seed: int, crop: CropSpec | None = None) -> tuple[LocalizationRecord, object]:
    """Sample the box, embed crop and image, and pick argmax and random cells per level."""
    rng = image_stream(seed, image.id)
    W, H = image.width, image.height
    box = crop if crop is not None else sample_crop(W, H, rng)
    z = embedder.crop(extract_crop(image, box).pixels)
    maps = embedder.pyramid(image.pixels)
    heat = similarity_heatmap(z, maps, W, H, crop=box)
    grid = grid_geometry(W, H)
    random_cells = [random_cell(grid, level, rng, extent=(W, H)) for level in range(len(maps))]
    return LocalizationRecord(image.id, box, grid, heat.argmax, random_cells), heat


def eval_sga_riga(embedder, dataset: DatasetManifest, seed: int = 0, mode: str = "center",
                  min_side: int | None = None, provenance: dict | None = None,
                  progress=None, boxes: dict[str, CropSpec] | None = None) -> MetricsReport:
    """Localize one crop per image and tally SGA/RIGA per level.

    ``boxes`` optionally fixes the crop for some image ids instead of sampling it.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown containment mode {mode!r}")
    if len(dataset) == 0:
        raise EmptyDataset("evaluation dataset is empty")
    records = []
    for index in range(len(dataset)):
        image = dataset.load(index, min_side)
        record, _ = localize_image(embedder, image, seed, crop=(boxes or {}).get(image.id))
        records.append(record)
        if progress is not None:
            progress(index + 1, len(dataset))
    return tally(records, mode, seed, provenance)
