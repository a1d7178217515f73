"""Small trainable multi-scale feature extractor.

Produces a three-level pyramid at strides 16 / 8 / 4 (coarse to fine) with a
shared channel depth. Four stages of (3x3 conv, GeLU, 2x average pool), with
taps after strides 4, 8 and 16 projected by 1x1 convs.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class FeaturePyramid:
    """Three feature maps sharing channel depth: c1 stride 16, c2 stride 8, c3 stride 4."""

    __slots__ = ("c1", "c2", "c3")

    def __init__(self, c1: torch.Tensor, c2: torch.Tensor, c3: torch.Tensor):
        self.c1 = c1
        self.c2 = c2
        self.c3 = c3

    def __iter__(self):
        return iter((self.c1, self.c2, self.c3))

    @property
    def strides(self) -> tuple[int, int, int]:
        return (16, 8, 4)


class ConvBackbone(nn.Module):
    """4-stage conv net tapping stride-4/8/16 features, all projected to ``out_dim``."""

    def __init__(self, out_dim: int = 64):
        super().__init__()
        widths = [max(8, out_dim // 4), max(8, out_dim // 2), out_dim, out_dim]
        ins = [3] + widths[:-1]
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.GELU(approximate="tanh"),
                nn.AvgPool2d(2),
            )
            for cin, cout in zip(ins, widths)
        )
        # Taps after stages 2/3/4 (strides 4, 8, 16) -> c3, c2, c1.
        self.proj_c3 = nn.Conv2d(widths[1], out_dim, 1)
        self.proj_c2 = nn.Conv2d(widths[2], out_dim, 1)
        self.proj_c1 = nn.Conv2d(widths[3], out_dim, 1)
        self.out_dim = out_dim

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        """image: (B, 3, H0, W0) with H0, W0 divisible by 16."""
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image dims must be divisible by 16, got {h}x{w}")
        x = self.stages[0](image)
        x = self.stages[1](x)
        c3 = self.proj_c3(x)
        x = self.stages[2](x)
        c2 = self.proj_c2(x)
        x = self.stages[3](x)
        c1 = self.proj_c1(x)
        return FeaturePyramid(c1, c2, c3)
