"""Feature extraction.

A small 4-stage convolutional trunk stands in for an ImageNet-pretrained
backbone. Mid-level features (shape-oriented) come from the middle stages,
high-level features (class-oriented) from the deepest stage. The trunk is
trained once as a classifier on the train-split classes, then frozen; an
alternative path loads precomputed feature maps from a documented binary
container, so real pretrained features can be plugged in.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

STAGE_STRIDES = (2, 2, 2, 1)

LEVELS = ("mid", "high")


@dataclass
class FeatureMap:
    """Dense c x h x w activation grid.

    stride is the number of input pixels per feature cell along each axis.
    """

    data: torch.Tensor
    level: str
    stride: int

    def validate(self) -> None:
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.data.ndim != 3:
            raise ValueError(f"feature data must be c x h x w, got {tuple(self.data.shape)}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValueError("feature grid must be at least 1x1")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature data contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 48, 64)
    mid_stages: tuple[int, ...] = (1, 2)
    high_stage: int = 3
    frozen: bool = True

    def validate(self) -> None:
        if len(self.widths) != len(STAGE_STRIDES):
            raise ValueError(
                f"widths must list {len(STAGE_STRIDES)} stages, got {len(self.widths)}"
            )
        if any(w < 1 for w in self.widths):
            raise ValueError("stage widths must be positive")
        if not self.mid_stages:
            raise ValueError("at least one mid stage required")
        if any(s < 0 or s >= len(self.widths) for s in self.mid_stages):
            raise ValueError(f"mid_stages out of range: {self.mid_stages}")
        if self.high_stage >= len(self.widths) or self.high_stage < 0:
            raise ValueError(f"high_stage out of range: {self.high_stage}")
        if any(s >= self.high_stage for s in self.mid_stages):
            raise ValueError("high_stage must be deeper than every mid stage")

    @property
    def mid_channels(self) -> int:
        return sum(self.widths[s] for s in self.mid_stages)

    @property
    def high_channels(self) -> int:
        return self.widths[self.high_stage]


def stage_stride(stage: int) -> int:
    """Cumulative input-pixels-per-cell at the given stage output."""
    out = 1
    for s in STAGE_STRIDES[: stage + 1]:
        out *= s
    return out


def min_input_size(config: BackboneConfig) -> int:
    return stage_stride(config.high_stage)


def he_init_(module: nn.Module, generator: torch.Generator) -> None:
    """He fan-in init on every conv weight, zero biases, from an explicit
    generator so construction is seedable without global state."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                noise = torch.randn(m.weight.shape, generator=generator)
                m.weight.copy_(noise * std)
                if m.bias is not None:
                    m.bias.zero_()


class ToyBackbone(nn.Module):
    """4-stage plain conv trunk, strides 2,2,2,1 between stages."""

    def __init__(self, config: BackboneConfig, generator: torch.Generator | None = None):
        super().__init__()
        config.validate()
        self.config = config
        stages = []
        c_in = 3
        for width, stride in zip(config.widths, STAGE_STRIDES):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, width, 3, stride=stride, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(width, width, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            c_in = width
        self.stages = nn.ModuleList(stages)
        if generator is not None:
            he_init_(self, generator)
        if config.frozen:
            freeze_backbone(self)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        # x: B x 3 x H x W -> one activation per stage
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


def freeze_backbone(backbone: nn.Module) -> nn.Module:
    backbone.requires_grad_(False)
    backbone.eval()
    return backbone


def extract_features(image: torch.Tensor, backbone: ToyBackbone) -> tuple[FeatureMap, FeatureMap]:
    """Run the trunk and collect (mid, high) feature maps.

    Mid-level is the channel concatenation of the configured mid stages; when
    their grids differ, deeper stages are resized bilinearly up to the
    shallowest mid stage's grid. High-level is the configured deep stage.

    Raises:
        ValueError: if the image is smaller than the trunk's minimum input.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected 3xHxW image, got {tuple(image.shape)}")
    cfg = backbone.config
    h, w = image.shape[1], image.shape[2]
    need = min_input_size(cfg)
    if h < need or w < need:
        raise ValueError(f"image {h}x{w} too small for stage strides (need >= {need})")

    with torch.no_grad():
        outs = backbone(image[None])

    mid_stages = sorted(cfg.mid_stages)
    target = outs[mid_stages[0]].shape[2:]
    parts = []
    for s in mid_stages:
        part = outs[s]
        if part.shape[2:] != target:
            part = F.interpolate(part, size=target, mode="bilinear", align_corners=False)
        parts.append(part)
    mid = torch.cat(parts, dim=1)[0]
    high = outs[cfg.high_stage][0]
    return (
        FeatureMap(data=mid, level="mid", stride=stage_stride(mid_stages[0])),
        FeatureMap(data=high, level="high", stride=stage_stride(cfg.high_stage)),
    )


def resize_mask_area(mask: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Area-average a binary H x W mask down to a soft [0,1] h x w map."""
    if tuple(mask.shape) == tuple(grid):
        return mask
    return F.interpolate(mask[None, None].float(), size=grid, mode="area")[0, 0]


def mask_features(f: FeatureMap, y: torch.Tensor) -> FeatureMap:
    """Zero out background: resize the support mask to the feature grid
    (area average, soft values kept) and broadcast-multiply over channels.

    Accepts y either at the original image resolution or already on the
    feature grid.

    Raises:
        ValueError: if y's resolution is inconsistent with the feature grid.
    """
    h, w = f.grid
    if tuple(y.shape) != (h, w):
        yh, yw = y.shape
        if math.ceil(yh / f.stride) != h or math.ceil(yw / f.stride) != w:
            raise ValueError(
                f"mask {yh}x{yw} does not map onto feature grid {h}x{w} "
                f"at stride {f.stride}"
            )
    soft = resize_mask_area(y.to(f.data.dtype), (h, w))
    return FeatureMap(data=f.data * soft[None], level=f.level, stride=f.stride)


_MAGIC = b"FMAP"
_VERSION = 1
_LEVEL_CODE = {"mid": 0, "high": 1}
_LEVEL_NAME = {v: k for k, v in _LEVEL_CODE.items()}
_HEADER = struct.Struct("<4sBBHIIII")  # magic, version, level, reserved, c, h, w, stride


def save_feature_map(f: FeatureMap, path) -> None:
    """Write the self-describing binary container (see README for the exact
    byte layout): 24-byte little-endian header, then row-major float32 data."""
    f.validate()
    c, (h, w) = f.channels, f.grid
    header = _HEADER.pack(_MAGIC, _VERSION, _LEVEL_CODE[f.level], 0, c, h, w, f.stride)
    data = np.ascontiguousarray(f.data.detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def load_feature_map(path) -> FeatureMap:
    """Read a container written by save_feature_map."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a feature-map container")
    magic, version, level, _, c, h, w, stride = _HEADER.unpack(raw[: _HEADER.size])
    if version != _VERSION:
        raise ValueError(f"unsupported feature-map version {version}")
    if level not in _LEVEL_NAME:
        raise ValueError(f"unknown level code {level}")
    expected = c * h * w * 4
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(c, h, w)
    return FeatureMap(
        data=torch.from_numpy(arr.copy()),
        level=_LEVEL_NAME[level],
        stride=stride,
    )
