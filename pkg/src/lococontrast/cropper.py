"""Random square crops, flip augmentation, and point remapping through flips.

Two flip conventions coexist on purpose: pixel arrays use the integer rule
``x -> W - 1 - x`` while continuous coordinates use ``x -> W - x``. A pixel
with index ``x`` covers ``[x, x + 1)``, so its centre ``x + 0.5`` maps to
``W - x - 0.5``, the centre of pixel ``W - 1 - x``; both rules agree.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import ImageSample
from .errors import ContractViolation

MIN_FRACTION = 0.10
MAX_FRACTION = 0.25


class CropClampWarning(UserWarning):
    """The drawn crop side exceeded min(W, H) and was clamped."""


@dataclass(frozen=True)
class CropSpec:
    a: int  # left
    b: int  # top
    w: int
    h: int

    @property
    def cx(self) -> float:
        return self.a + self.w / 2

    @property
    def cy(self) -> float:
        return self.b + self.h / 2

    @property
    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    def contains_point(self, x: float, y: float) -> bool:
        return self.a <= x <= self.a + self.w and self.b <= y <= self.b + self.h

    def contains_box(self, x0: float, y0: float, x1: float, y1: float) -> bool:
        return self.a <= x0 and x1 <= self.a + self.w and self.b <= y0 and y1 <= self.b + self.h

    def to_json(self) -> dict:
        return {"a": self.a, "b": self.b, "w": self.w, "h": self.h}


def side_bounds(W: int, H: int) -> tuple[int, int]:
    """Admissible integer crop sides: ceil(10%) .. floor(25%) of max(W, H)."""
    m = max(W, H)
    lo = max(1, math.ceil(MIN_FRACTION * m - 1e-9))
    hi = math.floor(MAX_FRACTION * m + 1e-9)
    return lo, max(lo, hi)


def sample_crop(W: int, H: int, rng: np.random.Generator) -> CropSpec:
    """Square crop with side in [0.10, 0.25] x max(W, H), placed fully inside the image.

    When the drawn side exceeds min(W, H) it is clamped to min(W, H) with a warning.
    """
    if W < 1 or H < 1:
        raise ContractViolation(f"bad image size {W}x{H}")
    lo, hi = side_bounds(W, H)
    side = int(rng.integers(lo, hi + 1))
    if side > min(W, H):
        warnings.warn(f"crop side {side} exceeds min(W, H)={min(W, H)} for {W}x{H} image; "
                      "clamping", CropClampWarning, stacklevel=2)
        side = min(W, H)
    a = int(rng.integers(0, W - side + 1))
    b = int(rng.integers(0, H - side + 1))
    return CropSpec(a, b, side, side)


def extract_crop(image: ImageSample, crop: CropSpec) -> ImageSample:
    W, H = image.width, image.height
    if crop.w < 1 or crop.h < 1 or crop.a < 0 or crop.b < 0 \
            or crop.a + crop.w > W or crop.b + crop.h > H:
        raise ContractViolation(f"crop {crop} outside {W}x{H} image")
    pixels = image.pixels[crop.b: crop.b + crop.h, crop.a: crop.a + crop.w].copy()
    return ImageSample(id=f"{image.id}@{crop.a},{crop.b},{crop.w}", pixels=pixels,
                       source=image.source)


@dataclass(frozen=True)
class AugRecord:
    hflip: bool
    vflip: bool
    width: int
    height: int

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip)


def sample_flips(rng: np.random.Generator, width: int, height: int, p: float = 0.5) -> AugRecord:
    hflip, vflip = rng.random(2) < p
    return AugRecord(bool(hflip), bool(vflip), int(width), int(height))


def no_flips(width: int, height: int) -> AugRecord:
    return AugRecord(False, False, int(width), int(height))


def apply_flips(image, rec: AugRecord):
    """Flip an ImageSample or an H x W x C array; HFlip first, then VFlip."""
    pixels = getattr(image, "pixels", image)
    if pixels.shape[1] != rec.width or pixels.shape[0] != rec.height:
        raise ContractViolation(
            f"AugRecord for {rec.width}x{rec.height} applied to {pixels.shape[1]}x{pixels.shape[0]}")
    out = pixels
    if rec.hflip:
        out = out[:, ::-1]
    if rec.vflip:
        out = out[::-1]
    out = np.ascontiguousarray(out)
    if isinstance(image, ImageSample):
        return ImageSample(id=image.id, pixels=out, source=image.source)
    return out


def map_point(rec: AugRecord, x: float, y: float) -> tuple[float, float]:
    if rec.hflip:
        x = rec.width - x
    if rec.vflip:
        y = rec.height - y
    return x, y
