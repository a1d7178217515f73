"""Cross-scale query aggregation.

A chain of upsample-fuse modules (2x bilinear upsample, 3x3 conv, GeLU)
progressively merges the coarse-to-fine per-scale query maps into one map at
half the input resolution. A separate module of the same form feeds the
auxiliary small-object branch from the finest scale.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class UpsampleFuse(nn.Module):
    """2x bilinear upsample (align_corners=False), 3x3 same-pad conv, GeLU."""

    def __init__(self, dim: int, norm: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm = nn.GroupNorm(1, dim) if norm else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return F.gelu(x, approximate="tanh")


class CrossScaleAggregator(nn.Module):
    """Fuse (coarse q1, mid q2, fine q3) into a single map at 2x the fine grid.

    out = up3(up2(up1(q1) + q2) + q3); each stage owns separate parameters.
    """

    def __init__(self, dim: int, norm: bool = False):
        super().__init__()
        self.up1 = UpsampleFuse(dim, norm)
        self.up2 = UpsampleFuse(dim, norm)
        self.up3 = UpsampleFuse(dim, norm)

    def forward(self, q1: torch.Tensor, q2: torch.Tensor, q3: torch.Tensor) -> torch.Tensor:
        x = self.up1(q1)
        if x.shape != q2.shape:
            raise ValueError(f"stage-2 shape mismatch: {tuple(x.shape)} vs {tuple(q2.shape)}")
        x = self.up2(x + q2)
        if x.shape != q3.shape:
            raise ValueError(f"stage-3 shape mismatch: {tuple(x.shape)} vs {tuple(q3.shape)}")
        return self.up3(x + q3)
