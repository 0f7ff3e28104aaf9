"""Crop encoder, pyramid encoder and the pyramid grid geometry.

The crop encoder maps a crop to one unit-norm embedding (backbone, global
average pool, two-layer MLP). The pyramid encoder maps a full image to five
feature grids at strides 8..128 (backbone, FPN with P6/P7 extra levels, a
shared 1x1 projection) and normalizes every cell. The two networks share no
parameters.

All convolutions use stride-2 / kernel-3 / padding-1 downsampling, so a level
with stride ``s`` has exactly ``ceil(H / s) x ceil(W / s)`` cells. Spatial
convs pad by edge replication: zero padding makes border cells systematically
different, which drags the similarity argmax of an untrained model to the
image edges.

The tiny backbone has no normalization layers by default. Per-sample
normalization computes its statistics over a small crop in one encoder and
over the whole image in the other, so the same colour lands on different
features in the two pipelines; in practice the pyramid then collapses to a
single direction before any crop/cell alignment is learned.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation

NUM_LEVELS = 5
BASE_STRIDE = 8
PAD_MODE = "replicate"


@dataclass
class ModelConfig:
    backbone: str = "tiny"  # "tiny" | "resnet18"
    embed_dim: int = 128
    pyramid_levels: int = NUM_LEVELS
    base_stride: int = BASE_STRIDE
    projection_hidden: int = 256
    fpn_channels: int = 64
    tiny_widths: tuple[int, ...] = (16, 24, 32, 64, 96)
    norm: str = "none"  # tiny backbone: "none" | "group"; resnet18 always uses GroupNorm

    def __post_init__(self):
        self.tiny_widths = tuple(self.tiny_widths)

    @property
    def strides(self) -> list[int]:
        return [self.base_stride * 2 ** level for level in range(self.pyramid_levels)]

    def validate(self) -> None:
        if self.backbone not in ("tiny", "resnet18"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.embed_dim < 8:
            raise ConfigError("embed_dim must be >= 8")
        if self.pyramid_levels != NUM_LEVELS or self.base_stride != BASE_STRIDE:
            raise ConfigError("the pyramid is fixed at 5 levels with base stride 8")
        if self.projection_hidden < 1 or self.fpn_channels < 1:
            raise ConfigError("layer widths must be positive")
        if self.norm not in ("group", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if len(self.tiny_widths) != 5 or any(w < 1 for w in self.tiny_widths):
            raise ConfigError("tiny_widths needs 5 positive entries (stem + 4 stages)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["tiny_widths"] = list(self.tiny_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ModelConfig:
        return cls(**d)


# ---------------------------------------------------------------------------
# grid geometry


@dataclass(frozen=True, order=True)
class CellIndex:
    level: int
    row: int
    col: int


@dataclass(frozen=True)
class PyramidGrid:
    width: int
    height: int
    strides: tuple[int, ...]
    dims: tuple[tuple[int, int], ...]  # (rows, cols) per level

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def stride(self, level: int) -> int:
        return self.strides[level]

    def shape(self, level: int) -> tuple[int, int]:
        return self.dims[level]

    def cell_count(self, level: int) -> int:
        rows, cols = self.dims[level]
        return rows * cols


def grid_geometry(width: int, height: int, config: ModelConfig | None = None) -> PyramidGrid:
    if width < 1 or height < 1:
        raise ContractViolation(f"bad image size {width}x{height}")
    strides = (config or ModelConfig()).strides
    dims = tuple((math.ceil(height / s), math.ceil(width / s)) for s in strides)
    return PyramidGrid(int(width), int(height), tuple(strides), dims)


def cell_center(grid: PyramidGrid, cell: CellIndex) -> tuple[float, float]:
    if not 0 <= cell.level < grid.num_levels:
        raise ContractViolation(f"level {cell.level} out of range")
    rows, cols = grid.dims[cell.level]
    if not (0 <= cell.row < rows and 0 <= cell.col < cols):
        raise ContractViolation(f"{cell} outside {rows}x{cols} grid")
    s = grid.strides[cell.level]
    return (cell.col + 0.5) * s, (cell.row + 0.5) * s


def cell_centers(grid: PyramidGrid, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Center x of each column and center y of each row."""
    rows, cols = grid.dims[level]
    s = grid.strides[level]
    return (np.arange(cols) + 0.5) * s, (np.arange(rows) + 0.5) * s


# ---------------------------------------------------------------------------
# networks


def _groups(channels: int) -> int:
    # at least two channels per group so 1x1 maps still normalize
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


def standardize(x: torch.Tensor) -> torch.Tensor:
    """Map [0, 1] pixels to roughly zero mean and unit spread."""
    return (x - 0.5) / 0.25


def conv_block(cin: int, cout: int, stride: int = 1, norm: str = "none") -> nn.Sequential:
    if norm == "none":
        return nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=PAD_MODE),
            nn.ReLU(inplace=True),
        )
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, padding_mode=PAD_MODE),
        nn.GroupNorm(_groups(cout), cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Stem plus four conv stages; returns C3, C4, C5 at strides 8, 16, 32."""

    def __init__(self, widths=(16, 24, 32, 64, 96), norm: str = "none"):
        super().__init__()
        stem, w1, w2, w3, w4 = widths

        def stage(cin, cout):
            return nn.Sequential(conv_block(cin, cout, 2, norm), conv_block(cout, cout, 1, norm))

        self.stem = conv_block(3, stem, 2, norm)
        self.stage1 = stage(stem, w1)
        self.stage2 = stage(w1, w2)
        self.stage3 = stage(w2, w3)
        self.stage4 = stage(w3, w4)
        if norm == "none":
            # without normalization the default init shrinks activations layer by
            # layer until every output is bias-dominated
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        self.out_channels = (w2, w3, w4)

    def forward(self, x):
        x = self.stage1(self.stem(standardize(x)))
        c3 = self.stage2(x)
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        return c3, c4, c5


class ResNet18Backbone(nn.Module):
    """torchvision ResNet-18 trunk (random init, GroupNorm) returning C3, C4, C5."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None, norm_layer=lambda c: nn.GroupNorm(_groups(c), c))
        for m in net.modules():
            if isinstance(m, nn.Conv2d) and m.padding != (0, 0):
                m.padding_mode = PAD_MODE
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = (
            net.layer1, net.layer2, net.layer3, net.layer4)
        self.out_channels = (128, 256, 512)

    def forward(self, x):
        x = self.layer1(self.stem(standardize(x)))
        c3 = self.layer2(x)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return c3, c4, c5


def make_backbone(config: ModelConfig) -> nn.Module:
    if config.backbone == "tiny":
        return TinyBackbone(config.tiny_widths, config.norm)
    return ResNet18Backbone()


class FPN(nn.Module):
    """RetinaNet-style pyramid: P3-P5 by top-down merging, P6/P7 by strided convs."""

    def __init__(self, in_channels, channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1,
                                              padding_mode=PAD_MODE) for _ in in_channels)
        self.p6 = nn.Conv2d(channels, channels, 3, stride=2, padding=1, padding_mode=PAD_MODE)
        self.p7 = nn.Conv2d(channels, channels, 3, stride=2, padding=1, padding_mode=PAD_MODE)

    def forward(self, feats):
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest")
        outs = [conv(x) for conv, x in zip(self.output, laterals)]
        p6 = self.p6(outs[-1])
        p7 = self.p7(F.relu(p6))
        return outs + [p6, p7]


class CropEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.backbone = make_backbone(config)
        c5 = self.backbone.out_channels[-1]
        self.projection = nn.Sequential(
            nn.Linear(c5, config.projection_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(config.projection_hidden, config.embed_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """N x 3 x h x w -> N x d unit vectors."""
        c5 = self.backbone(x)[-1]
        pooled = c5.mean(dim=(2, 3))
        return F.normalize(self.projection(pooled), dim=1)

    def encode_many(self, crops) -> torch.Tensor:
        """Encode crops of differing sizes one at a time; returns len(crops) x d."""
        return torch.cat([self(c.unsqueeze(0) if c.dim() == 3 else c) for c in crops])


class PyramidEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.backbone = make_backbone(config)
        self.fpn = FPN(self.backbone.out_channels, config.fpn_channels)
        # shared across levels so every grid lands in the crop encoder's space
        self.projection = nn.Conv2d(config.fpn_channels, config.embed_dim, 1)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """N x 3 x H x W -> five N x d x rows x cols maps, unit-norm along d."""
        levels = self.fpn(self.backbone(x))
        return [F.normalize(self.projection(p), dim=1) for p in levels]


def build_models(config: ModelConfig, seed: int = 0) -> tuple[CropEncoder, PyramidEncoder]:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        crop_encoder = CropEncoder(config)
        pyramid_encoder = PyramidEncoder(config)
    return crop_encoder, pyramid_encoder


# ---------------------------------------------------------------------------
# inference helpers


@dataclass
class FeatureMap:
    level: int
    stride: int
    values: np.ndarray  # rows x cols x d

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])


def _as_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image
    else:
        pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float32)
        t = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))
    return t if t.dim() == 4 else t.unsqueeze(0)


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def encode_crop(model: CropEncoder, crop) -> np.ndarray:
    t = _as_tensor(crop)
    if t.shape[-1] < 1 or t.shape[-2] < 1:
        raise ContractViolation("empty crop")
    was_training = model.training
    model.eval()
    z = model(t.to(_param_dtype(model)))[0]
    model.train(was_training)
    return z.cpu().numpy()


@torch.no_grad()
def encode_pyramid(model: PyramidEncoder, image) -> list[FeatureMap]:
    t = _as_tensor(image)
    was_training = model.training
    model.eval()
    maps = model(t.to(_param_dtype(model)))
    model.train(was_training)
    return [FeatureMap(level=l, stride=BASE_STRIDE * 2 ** l,
                       values=m[0].permute(1, 2, 0).cpu().numpy())
            for l, m in enumerate(maps)]
