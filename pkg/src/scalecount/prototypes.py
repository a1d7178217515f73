"""Exemplar prototypes: shared shape MLP plus per-scale appearance pooling."""

from __future__ import annotations

import torch
import torch.nn as nn


def bilinear_sample(fmap: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Bilinear interpolation on a (C, H, W) map with border replication.

    Continuous coordinates place pixel (r, c) at center (c + 0.5, r + 0.5).
    Differentiable w.r.t. ``fmap``. Returns (N, C) samples.
    """
    _, h, w = fmap.shape
    x = (xs - 0.5).clamp(0, w - 1)
    y = (ys - 0.5).clamp(0, h - 1)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    flat = fmap.reshape(fmap.shape[0], -1)  # (C, H*W)

    def at(yy, xx):
        return flat[:, yy * w + xx].T  # (N, C)

    w00 = ((1 - fx) * (1 - fy)).unsqueeze(1)
    w01 = (fx * (1 - fy)).unsqueeze(1)
    w10 = ((1 - fx) * fy).unsqueeze(1)
    w11 = (fx * fy).unsqueeze(1)
    return w00 * at(y0, x0) + w01 * at(y0, x1) + w10 * at(y1, x0) + w11 * at(y1, x1)


def roi_align_mean(
    fmap: torch.Tensor, boxes: torch.Tensor, stride: float, pool_size: int = 3
) -> torch.Tensor:
    """Average-pooled RoI features, one vector per box.

    ``fmap`` is (C, H, W) in feature coordinates; ``boxes`` (K, 4) xyxy in
    image pixels, mapped into feature space by dividing by ``stride``. Each
    box is sampled on a pool_size x pool_size grid of bin centers (one
    bilinear sample per bin) and averaged. Degenerate boxes collapse to a
    single sample at the box center.
    """
    if boxes.numel() == 0:
        return fmap.new_zeros((0, fmap.shape[0]))
    b = boxes.to(fmap.dtype) / stride
    k = b.shape[0]
    s = pool_size
    steps = (torch.arange(s, dtype=fmap.dtype, device=fmap.device) + 0.5) / s
    ws = (b[:, 2] - b[:, 0]).unsqueeze(1)  # (K,1)
    hs = (b[:, 3] - b[:, 1]).unsqueeze(1)
    xs = b[:, 0:1] + steps.unsqueeze(0) * ws  # (K,S)
    ys = b[:, 1:2] + steps.unsqueeze(0) * hs
    grid_x = xs.unsqueeze(1).expand(k, s, s).reshape(-1)  # rows vary y, cols vary x
    grid_y = ys.unsqueeze(2).expand(k, s, s).reshape(-1)
    samples = bilinear_sample(fmap, grid_x, grid_y)  # (K*S*S, C)
    return samples.reshape(k, s * s, -1).mean(dim=1)


class ShapeEncoder(nn.Module):
    """MLP mapping normalized exemplar (width, height) to a d-vector.

    One hidden layer of width d with GeLU; parameters shared across all
    pyramid scales so every scale sees identical size cues.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2, dim), nn.GELU(approximate="tanh"), nn.Linear(dim, dim))

    def forward(self, boxes: torch.Tensor, image_size) -> torch.Tensor:
        """boxes: (K, 4) xyxy in image pixels; image_size: (H0, W0)."""
        h0, w0 = image_size
        wh = torch.stack(
            [(boxes[:, 2] - boxes[:, 0]) / w0, (boxes[:, 3] - boxes[:, 1]) / h0], dim=1
        )
        return self.net(wh.to(self.net[0].weight.dtype))


def assemble_prototypes(appearance: torch.Tensor, shape: torch.Tensor) -> torch.Tensor:
    """Stack appearance rows over shape rows -> (2K, d)."""
    if appearance.shape != shape.shape:
        raise ValueError(
            f"appearance {tuple(appearance.shape)} and shape {tuple(shape.shape)} disagree"
        )
    return torch.cat([appearance, shape], dim=0)


class PrototypeBuilder(nn.Module):
    """Builds per-scale (2K, d) prototype stacks from exemplar boxes."""

    def __init__(self, dim: int, pool_size: int = 3):
        super().__init__()
        self.shape_encoder = ShapeEncoder(dim)
        self.pool_size = pool_size

    def shape_prototypes(self, boxes: torch.Tensor, image_size) -> torch.Tensor:
        return self.shape_encoder(boxes, image_size)

    def appearance_prototypes(
        self, fmap: torch.Tensor, boxes: torch.Tensor, stride: float
    ) -> torch.Tensor:
        return roi_align_mean(fmap, boxes, stride, self.pool_size)

    def forward(
        self, fmap: torch.Tensor, boxes: torch.Tensor, stride: float, image_size
    ) -> torch.Tensor:
        app = self.appearance_prototypes(fmap, boxes, stride)
        shp = self.shape_prototypes(boxes, image_size)
        return assemble_prototypes(app, shp)
