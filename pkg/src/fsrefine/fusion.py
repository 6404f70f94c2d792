"""Fusion network G.

Concatenates {prior, condensed support mid-features, query mid-features}
channel-wise, reduces with a 1x1 conv, processes a descending pyramid of
scales with per-scale conv blocks merged coarse-to-fine, and predicts
2-channel logits. A simplified feature-enrichment skeleton: plain conv
blocks, no attention.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeatureMap, he_init_
from .prior import ProbMap

logger = logging.getLogger(__name__)


class EmptySupportWarning(UserWarning):
    """Support mask carried zero foreground mass; prototype is all zeros."""


@dataclass
class FusionInput:
    """The concatenation operands. All three share the same h x w grid;
    the prior occupies channel index 0 of the concatenation."""

    prior: ProbMap
    support_mid: FeatureMap
    query_mid: FeatureMap

    def validate(self) -> None:
        g = self.prior.grid
        if self.support_mid.grid != g or self.query_mid.grid != g:
            raise ValueError(
                f"grids differ: prior {g}, support {self.support_mid.grid}, "
                f"query {self.query_mid.grid}"
            )
        if self.support_mid.channels != self.query_mid.channels:
            raise ValueError(
                f"mid channel mismatch: support {self.support_mid.channels} "
                f"vs query {self.query_mid.channels}"
            )
        if __debug__:
            self.prior.validate()


def condense_support(
    support_mid_masked, mask: torch.Tensor, grid: tuple[int, int] | None = None
) -> FeatureMap:
    """Masked global average pooling to a prototype, broadcast over the grid.

    The input features are already background-zeroed, so the prototype is
    their sum divided by the mask's foreground mass (a weighted mean when the
    mask is soft). Zero mass yields a zero prototype and an
    EmptySupportWarning.

    Args:
        support_mid_masked: FeatureMap (or c x h x w tensor) of masked
            mid-level support features.
        mask: h x w map on the same grid, values in [0,1].
        grid: broadcast target; defaults to the input grid.
    """
    f = support_mid_masked.data if isinstance(support_mid_masked, FeatureMap) else support_mid_masked
    if tuple(mask.shape) != tuple(f.shape[1:]):
        raise ValueError(f"mask {tuple(mask.shape)} not on feature grid {tuple(f.shape[1:])}")
    mass = mask.sum()
    if mass.item() <= 0.0:
        warnings.warn("support mask has zero foreground mass", EmptySupportWarning)
        proto = f.new_zeros(f.shape[0])
    else:
        proto = f.sum(dim=(1, 2)) / mass.to(f.dtype)
    h, w = grid if grid is not None else (f.shape[1], f.shape[2])
    data = proto[:, None, None].expand(f.shape[0], h, w)
    stride = support_mid_masked.stride if isinstance(support_mid_masked, FeatureMap) else 1
    return FeatureMap(data=data, level="mid", stride=stride)


def pyramid_scales(grid_size: int) -> tuple[int, ...]:
    """Default descending scale set {s, s/2, s/4, s/8} rounded, deduplicated."""
    raw = [max(1, int(round(grid_size / d))) for d in (1, 2, 4, 8)]
    out = []
    for s in raw:
        if s not in out:
            out.append(s)
    return tuple(out)


def parameter_count(mid_channels: int, scales, width: int) -> int:
    """Closed-form parameter total; asserted against the live module."""
    n = len(tuple(scales))
    c_in = 1 + 2 * mid_channels
    reduce = c_in * width + width
    blocks = n * 2 * (width * width * 9 + width)
    merges = (n - 1) * (2 * width * width * 9 + width)
    head = (width * width * 9 + width) + (width * 2 + 2)
    return reduce + blocks + merges + head


class FusionNet(nn.Module):
    """The trainable fusion network.

    Args:
        mid_channels: channel count of each mid-level feature block.
        scales: descending spatial sizes for the enrichment pyramid.
        width: internal channel width.
        generator: optional torch.Generator for seeded He init.
    """

    def __init__(
        self,
        mid_channels: int,
        scales,
        width: int = 32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        scales = tuple(int(s) for s in scales)
        if not scales:
            raise ValueError("scale set must not be empty")
        if any(s < 1 for s in scales):
            raise ValueError(f"scales must be positive, got {scales}")
        if len(set(scales)) != len(scales):
            raise ValueError(f"duplicate scales: {scales}")
        if list(scales) != sorted(scales, reverse=True):
            raise ValueError(f"scales must be strictly descending, got {scales}")
        self.mid_channels = mid_channels
        self.scales = scales
        self.width = width

        c_in = 1 + 2 * mid_channels
        self.reduce = nn.Conv2d(c_in, width, 1)
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(inplace=True),
            )
            for _ in scales
        )
        # merges[i] folds the coarser chain into the block at scale index i
        self.merges = nn.ModuleList(
            nn.Conv2d(2 * width, width, 3, padding=1) for _ in scales[:-1]
        )
        self.head_conv = nn.Conv2d(width, width, 3, padding=1)
        self.head_out = nn.Conv2d(width, 2, 1)
        if generator is not None:
            he_init_(self, generator)
        self._truncation_logged: set[tuple[int, int]] = set()

    def effective_scales(self, grid: tuple[int, int]) -> list[tuple[int, int]]:
        """(block index, size) pairs usable at this grid.

        Scales larger than min(h, w) are dropped; if every scale is dropped
        the smallest scale's block runs at min(h, w). Logged once per grid.
        """
        limit = min(grid)
        kept = [(i, s) for i, s in enumerate(self.scales) if s <= limit]
        if not kept:
            kept = [(len(self.scales) - 1, limit)]
        if len(kept) < len(self.scales) and grid not in self._truncation_logged:
            self._truncation_logged.add(grid)
            logger.info(
                "scale set %s truncated to %s for grid %s",
                self.scales, [s for _, s in kept], grid,
            )
        return kept

    def fuse_and_enrich(self, fin: FusionInput) -> torch.Tensor:
        """Concatenate, reduce, run the pyramid, merge coarse-to-fine.

        Returns the enriched width x h x w map at the input grid.
        """
        fin.validate()
        prior = fin.prior.data
        if prior.ndim == 2:
            prior = prior[None]
        x = torch.cat([prior, fin.support_mid.data, fin.query_mid.data], dim=0)[None]
        x = F.relu(self.reduce(x))
        h, w = fin.prior.grid

        chain = self.effective_scales((h, w))
        feats = []
        for i, s in chain:
            xs = F.interpolate(x, size=(s, s), mode="bilinear", align_corners=False)
            feats.append(self.blocks[i](xs))
        merged = feats[-1]
        for k in range(len(chain) - 2, -1, -1):
            idx, s = chain[k]
            up = F.interpolate(merged, size=(s, s), mode="bilinear", align_corners=False)
            merged = F.relu(self.merges[idx](torch.cat([feats[k], up], dim=1)))
        out = F.interpolate(merged, size=(h, w), mode="bilinear", align_corners=False)
        return out[0]

    def predict_logits(self, enriched: torch.Tensor) -> torch.Tensor:
        """Prediction head: the 2 x h x w logits."""
        x = F.relu(self.head_conv(enriched[None]))
        return self.head_out(x)[0]

    def forward(self, fin: FusionInput) -> torch.Tensor:
        return self.predict_logits(self.fuse_and_enrich(fin))


def fuse_and_enrich(fin: FusionInput, net: FusionNet) -> torch.Tensor:
    return net.fuse_and_enrich(fin)


def predict_logits(enriched: torch.Tensor, net: FusionNet) -> torch.Tensor:
    return net.predict_logits(enriched)
