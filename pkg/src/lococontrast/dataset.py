"""Image ingestion: synthetic shape scenes, image directories, resizing and batch padding."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .errors import ConfigError, ContractViolation, EmptyDataset

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SHAPE_KINDS = ("circle", "rectangle", "triangle")


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    source: str = "file"

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def to_tensor(self) -> torch.Tensor:
        """3 x H x W float tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))


@dataclass
class SynthConfig:
    image_size: int = 256
    min_shapes: int = 3
    max_shapes: int = 8
    kinds: tuple[str, ...] = SHAPE_KINDS
    noise_amplitude: float = 0.04
    min_shape_size: int = 14
    max_shape_size: int = 56
    seed: int = 0

    def validate(self, max_stride: int = 32) -> None:
        # the top pyramid levels are allowed to degenerate, so only the
        # finest four strides bound the image size
        if self.image_size < 4 * max_stride:
            raise ConfigError(f"image_size {self.image_size} < 4 x stride {max_stride}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 1 <= min_shapes <= max_shapes")
        if not 2 <= self.min_shape_size <= self.max_shape_size < self.image_size:
            raise ConfigError("shape sizes must fit inside the image")
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown or not self.kinds:
            raise ConfigError(f"unknown shape kinds {sorted(unknown)}")


@dataclass
class ManifestItem:
    id: str
    path: str
    seed: int | None = None
    shapes: list[dict] | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    split: str = "train"
    generator_config: SynthConfig | None = None
    warnings: list[str] = field(default_factory=list)
    root: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.split not in ("train", "eval"):
            raise ConfigError(f"split must be train or eval, got {self.split!r}")
        ids = [item.id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate ids in manifest")

    def __len__(self) -> int:
        return len(self.items)

    def resolve(self, item: ManifestItem) -> Path:
        p = Path(item.path)
        return p if p.is_absolute() else self.root / p

    def load(self, index: int, min_side: int | None = None) -> ImageSample:
        item = self.items[index]
        source = "synthetic" if self.generator_config is not None else "file"
        sample = read_image(self.resolve(item), item.id, source)
        if min_side is not None:
            sample = ensure_min_size(sample, min_side)
        return sample

    def subset(self, indices) -> DatasetManifest:
        return DatasetManifest(
            items=[self.items[i] for i in indices],
            split=self.split,
            generator_config=self.generator_config,
            warnings=list(self.warnings),
            root=self.root,
        )

    def to_json(self) -> dict:
        out = {"items": [item.to_json() for item in self.items], "split": self.split}
        if self.generator_config is not None:
            out["generator_config"] = asdict(self.generator_config)
        if self.warnings:
            out["warnings"] = list(self.warnings)
        return out

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".partial")
        tmp.write_text(json.dumps(self.to_json(), indent=2))
        os.replace(tmp, path)
        return path

    @classmethod
    def from_file(cls, path) -> DatasetManifest:
        path = Path(path)
        raw = json.loads(path.read_text())
        gen = raw.get("generator_config")
        if gen is not None:
            gen = SynthConfig(**{**gen, "kinds": tuple(gen.get("kinds", SHAPE_KINDS))})
        return cls(
            items=[ManifestItem(**item) for item in raw["items"]],
            split=raw.get("split", "train"),
            generator_config=gen,
            warnings=list(raw.get("warnings", [])),
            root=path.parent,
        )


def open_dataset(path, split: str = "eval") -> DatasetManifest:
    """Accept either a manifest JSON file or a directory of images."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset: {path}")
    if path.is_dir():
        manifest_file = path / "manifest.json"
        if manifest_file.exists():
            return DatasetManifest.from_file(manifest_file)
        return load_image_dir(path, split=split)
    return DatasetManifest.from_file(path)


def read_image(path, image_id: str | None = None, source: str = "file") -> ImageSample:
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImageSample(id=image_id or path.stem, pixels=arr, source=source)


def write_png(sample_or_pixels, path) -> None:
    pixels = getattr(sample_or_pixels, "pixels", sample_or_pixels)
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# synthetic scenes


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    # a smooth two-colour gradient in a random direction gives every location
    # a weakly distinctive backdrop; the noise keeps it from being trivially flat
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    t = (np.cos(theta) * (xs - 0.5) + np.sin(theta) * (ys - 0.5)) / np.sqrt(0.5) + 0.5
    t = np.clip(t, 0.0, 1.0)[..., None]
    img = c0 * (1 - t) + c1 * t
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _shape_color(rng: np.random.Generator) -> np.ndarray:
    # saturated colours so shapes stand out against the muted background
    color = rng.uniform(0.0, 1.0, size=3)
    color[rng.integers(3)] = rng.choice([0.0, 1.0])
    return color


def render_scene(config: SynthConfig, seed: int) -> tuple[np.ndarray, list[dict]]:
    """Render one scene; returns uint8 pixels and the placed shapes."""
    rng = np.random.default_rng(seed)
    size = config.image_size
    bg = _background(rng, size, config.noise_amplitude)
    canvas = Image.fromarray(np.rint(bg * 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(canvas)

    n_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    placed: list[dict] = []
    boxes: list[tuple[int, int, int, int]] = []
    attempts = 0
    while len(placed) < n_shapes and attempts < 200:
        attempts += 1
        kind = str(rng.choice(config.kinds))
        side = int(rng.integers(config.min_shape_size, config.max_shape_size + 1))
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        box = (x0, y0, x0 + side, y0 + side)
        # keep shapes disjoint (with a 2 px margin) so each one stays distinguishable
        if any(box[0] < b[2] + 2 and b[0] < box[2] + 2 and box[1] < b[3] + 2 and b[1] < box[3] + 2
               for b in boxes):
            continue
        color = _shape_color(rng)
        fill = tuple(int(round(c * 255)) for c in color)
        x1, y1 = x0 + side - 1, y0 + side - 1
        if kind == "circle":
            draw.ellipse((x0, y0, x1, y1), fill=fill)
        elif kind == "rectangle":
            h = int(rng.integers(max(2, side // 2), side + 1))
            top = y0 + (side - h) // 2
            draw.rectangle((x0, top, x1, top + h - 1), fill=fill)
        else:
            draw.polygon([((x0 + x1) / 2, y0), (x0, y1), (x1, y1)], fill=fill)
        boxes.append(box)
        placed.append({"kind": kind, "box": list(box), "color": [round(float(c), 4) for c in color]})
    if len(placed) < config.min_shapes:
        raise ConfigError("could not place the minimum number of shapes; enlarge image_size")
    return np.asarray(canvas, dtype=np.uint8), placed


def generate_synthetic(config: SynthConfig, count: int, out_dir, split: str = "train",
                       start_index: int = 0) -> DatasetManifest:
    """Write ``count`` synthetic PNGs plus ``manifest.json`` into ``out_dir``.

    Image ``k`` is rendered from the seed pair (config.seed, start_index + k), so
    regenerating with the same arguments is byte-identical and disjoint index
    ranges give disjoint train/eval sets.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory not writable: {out_dir}")

    items = []
    for k in range(start_index, start_index + count):
        seed = int(np.random.SeedSequence([config.seed, k]).generate_state(1)[0])
        pixels, shapes = render_scene(config, seed)
        name = f"synth_{k:06d}.png"
        Image.fromarray(pixels, mode="RGB").save(out_dir / name, format="PNG")
        items.append(ManifestItem(id=f"synth_{k:06d}", path=name, seed=seed, shapes=shapes))
    manifest = DatasetManifest(items=items, split=split, generator_config=config, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# real images


def load_image_dir(path, split: str = "train") -> DatasetManifest:
    """Index every decodable image in ``path`` in filename order.

    Undecodable files are skipped; each skip is logged and recorded in the
    manifest's ``warnings``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    items, warnings = [], []
    for entry in sorted(p for p in root.iterdir() if p.is_file() and p.name != "manifest.json"):
        try:
            with Image.open(entry) as im:
                im.verify()
        except Exception as exc:  # PIL raises a zoo of types for bad files
            msg = f"skipped undecodable file {entry.name}: {type(exc).__name__}"
            logger.warning(msg)
            warnings.append(msg)
            continue
        items.append(ManifestItem(id=entry.stem if entry.suffix.lower() in IMAGE_SUFFIXES
                                  else entry.name, path=entry.name))
    if not items:
        raise EmptyDataset(f"no decodable images in {root}")
    # stems can collide across extensions (a.png, a.jpg)
    seen: dict[str, int] = {}
    for item in items:
        if item.id in seen:
            item.id = Path(item.path).name
        seen[item.id] = 1
    return DatasetManifest(items=items, split=split, warnings=warnings, root=root)


def ensure_min_size(image: ImageSample, min_side: int) -> ImageSample:
    """Bilinearly upscale so that max(W, H) == min_side when the image is smaller."""
    if min_side < 1:
        raise ConfigError("min_side must be >= 1")
    W, H = image.width, image.height
    if max(W, H) >= min_side:
        return image
    scale = min_side / max(W, H)
    new_w = min_side if W >= H else max(1, int(round(W * scale)))
    new_h = min_side if H >= W else max(1, int(round(H * scale)))
    t = image.to_tensor().unsqueeze(0)
    out = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)
    pixels = out[0].clamp(0.0, 1.0).permute(1, 2, 0).contiguous().numpy()
    return ImageSample(id=image.id, pixels=pixels, source=image.source)


@dataclass
class PaddedBatch:
    images: list[np.ndarray]
    original_sizes: list[tuple[int, int]]  # (W, H)

    @property
    def height(self) -> int:
        return int(self.images[0].shape[0])

    @property
    def width(self) -> int:
        return int(self.images[0].shape[1])

    def to_tensor(self) -> torch.Tensor:
        """N x 3 x H_max x W_max."""
        return torch.from_numpy(np.stack(self.images).transpose(0, 3, 1, 2).copy())

    def unpad(self) -> list[np.ndarray]:
        return [img[:h, :w] for img, (w, h) in zip(self.images, self.original_sizes)]


def pad_batch(images: list) -> PaddedBatch:
    """Zero-pad every image at the bottom/right up to the batch's max W and H."""
    if not images:
        raise ContractViolation("pad_batch needs at least one image")
    arrays = [np.asarray(getattr(im, "pixels", im)) for im in images]
    h_max = max(a.shape[0] for a in arrays)
    w_max = max(a.shape[1] for a in arrays)
    padded, sizes = [], []
    for a in arrays:
        out = np.zeros((h_max, w_max, a.shape[2]), dtype=a.dtype)
        out[: a.shape[0], : a.shape[1]] = a
        padded.append(out)
        sizes.append((int(a.shape[1]), int(a.shape[0])))
    return PaddedBatch(images=padded, original_sizes=sizes)
