"""Multi-scale feature pyramid (backbone + BiFPN) and dense patchification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

BACKBONES = ("small-cnn", "pretrained-resnet18", "resnet18")
# stride of each backbone stage output; pyramid levels tap the deepest L stages
STAGE_STRIDES = (4, 8, 16, 32)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = "small-cnn"
    levels: int = 3
    channels: int = 64
    bifpn_repeats: int = 2
    input_size: int = 256
    width: int = 32  # small-cnn base width
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if not 1 <= self.levels <= len(STAGE_STRIDES):
            raise ConfigError(f"levels must be in [1, {len(STAGE_STRIDES)}], got {self.levels}")
        if self.channels < 8:
            raise ConfigError("pyramid channel width must be >= 8")
        if self.bifpn_repeats < 0:
            raise ConfigError("bifpn_repeats must be >= 0")

    @property
    def strides(self) -> tuple[int, ...]:
        return STAGE_STRIDES[len(STAGE_STRIDES) - self.levels :]

    def grid_sizes(self, size: int | None = None) -> list[int]:
        size = self.input_size if size is None else size
        return [size // s for s in self.strides]


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # each C x H_i x W_i
    strides: tuple[int, ...]

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ShapeError("one stride per pyramid level required")
        channels = {lvl.shape[0] for lvl in self.levels}
        if len(channels) != 1:
            raise ShapeError(f"pyramid levels must share channel width, got {sorted(channels)}")


@dataclass
class PatchSet:
    patches: torch.Tensor  # N x C
    coords: np.ndarray  # N x 2 (row, col)
    scale_index: int
    grid: tuple[int, int]
    stride: int

    @property
    def n(self) -> int:
        return self.patches.shape[0]


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(max(1, min(8, cout // 2)), cout), nn.SiLU())


class SmallCNN(nn.Module):
    """Four conv blocks with output strides 4, 8, 16, 32."""

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.out_channels = (w, 2 * w, 4 * w, 4 * w)
        self.stages = nn.ModuleList(
            [
                nn.Sequential(_conv(3, w, 2), _conv(w, w, 2)),
                nn.Sequential(_conv(w, 2 * w, 2), _conv(2 * w, 2 * w)),
                nn.Sequential(_conv(2 * w, 4 * w, 2), _conv(4 * w, 4 * w)),
                nn.Sequential(_conv(4 * w, 4 * w, 2), _conv(4 * w, 4 * w)),
            ]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class ResNet18Taps(nn.Module):
    """torchvision ResNet-18 exposing layer1..layer4 outputs."""

    def __init__(self, pretrained: bool):
        super().__init__()
        from torchvision.models import ResNet18_Weights, resnet18

        net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1 if pretrained else None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.out_channels = (64, 128, 256, 512)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class _Fuse(nn.Module):
    """Fast normalized fusion: ``conv(sum_k w_k x_k / (sum_k w_k + eps))`` with ``w = relu(raw)``."""

    def __init__(self, n_inputs: int, channels: int):
        super().__init__()
        self.weights = nn.Parameter(torch.ones(n_inputs))
        self.conv = _conv(channels, channels)

    def forward(self, inputs: list[torch.Tensor]) -> torch.Tensor:
        w = F.relu(self.weights)
        w = w / (w.sum() + 1e-4)
        return self.conv(sum(wk * xk for wk, xk in zip(w, inputs)))


class BiFPNLayer(nn.Module):
    """One top-down plus bottom-up pass over ``L`` equal-width levels (finest first)."""

    def __init__(self, levels: int, channels: int):
        super().__init__()
        self.levels = levels
        self.top_down = nn.ModuleList([_Fuse(2, channels) for _ in range(levels - 1)])
        self.bottom_up = nn.ModuleList([_Fuse(3 if i < levels - 1 else 2, channels) for i in range(1, levels)])

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        L = self.levels
        if L == 1:
            return feats
        td = [None] * L
        td[L - 1] = feats[L - 1]
        for i in range(L - 2, -1, -1):
            up = F.interpolate(td[i + 1], size=feats[i].shape[-2:], mode="nearest")
            td[i] = self.top_down[i]([feats[i], up])
        out = [td[0]]
        for i in range(1, L):
            down = F.max_pool2d(out[i - 1], kernel_size=2)
            inputs = [feats[i], td[i], down] if i < L - 1 else [feats[i], down]
            out.append(self.bottom_up[i - 1](inputs))
        return out


class FeatureExtractor(nn.Module):
    """Backbone, lateral projections, BiFPN repeats and a final 1x1 projection per level."""

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        if config.backbone == "small-cnn":
            self.backbone = SmallCNN(config.width)
        else:
            self.backbone = ResNet18Taps(pretrained=config.backbone == "pretrained-resnet18")
        taps = self.backbone.out_channels[len(STAGE_STRIDES) - config.levels :]
        self.lateral = nn.ModuleList([nn.Conv2d(c, config.channels, 1) for c in taps])
        self.bifpn = nn.ModuleList([BiFPNLayer(config.levels, config.channels) for _ in range(config.bifpn_repeats)])
        self.output = nn.ModuleList([nn.Conv2d(config.channels, config.channels, 1) for _ in taps])
        self.register_buffer("mean", torch.tensor(config.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(config.std).view(1, 3, 1, 1), persistent=False)

    def check_input(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected a B x 3 x H x W batch, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        stride = STAGE_STRIDES[-1]
        if h % stride or w % stride:
            lo = (h // stride) * stride
            raise ShapeError(
                f"input {h}x{w} incompatible with max stride {stride}; use a multiple of {stride} "
                f"(e.g. {max(lo, stride)} or {lo + stride})"
            )

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Map a ``B x 3 x H x W`` batch in [0, 1] to ``L`` maps ``B x C x H/s x W/s``."""
        self.check_input(images)
        x = (images - self.mean.to(images.dtype)) / self.std.to(images.dtype)
        stages = self.backbone(x)[len(STAGE_STRIDES) - self.config.levels :]
        feats = [lat(s) for lat, s in zip(self.lateral, stages)]
        for layer in self.bifpn:
            feats = layer(feats)
        return [proj(f) for proj, f in zip(self.output, feats)]


def to_tensor(images) -> torch.Tensor:
    """Stack ``H x W x 3`` arrays (or ImageSamples) into a ``B x 3 x H x W`` float tensor."""
    arrays = [getattr(im, "pixels", im) for im in images]
    return torch.from_numpy(np.stack(arrays).transpose(0, 3, 1, 2).copy())


def extract_pyramid(images: torch.Tensor, extractor: FeatureExtractor) -> list[FeaturePyramid]:
    """Run the extractor and split the batch into one FeaturePyramid per image."""
    maps = extractor(images)
    strides = extractor.config.strides
    return [FeaturePyramid([m[b] for m in maps], strides) for b in range(images.shape[0])]


def grid_coords(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def flatten_level(level: torch.Tensor) -> torch.Tensor:
    """``C x H x W`` (or batched ``B x C x H x W``) -> row-major patch matrix ``(H*W) x C``."""
    return level.flatten(-2).transpose(-1, -2)


def patchify(pyramid: FeaturePyramid) -> list[PatchSet]:
    out = []
    for i, (level, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
        _, h, w = level.shape
        out.append(PatchSet(flatten_level(level), grid_coords(h, w), i, (h, w), stride))
    return out


def unpatchify(patch_set: PatchSet) -> torch.Tensor:
    """Scatter patch embeddings back onto their grid (inverse of ``patchify``)."""
    h, w = patch_set.grid
    c = patch_set.patches.shape[1]
    out = patch_set.patches.new_zeros(c, h, w)
    rows = torch.as_tensor(patch_set.coords[:, 0])
    cols = torch.as_tensor(patch_set.coords[:, 1])
    out[:, rows, cols] = patch_set.patches.T
    return out
