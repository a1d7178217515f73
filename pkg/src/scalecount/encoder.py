"""Per-scale dense query construction.

A stack of prototype-to-feature cross-attention blocks seeds the query map
from the backbone features, then deformable-attention blocks refine each
cell from a few learned nearby sample points. Every block preserves the
spatial shape.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sincos_position_encoding(
    h: int, w: int, dim: int, device=None, dtype=torch.float32
) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, (h*w, dim). ``dim`` divisible by 4."""
    if dim % 4:
        raise ValueError(f"positional encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(quarter, device=device, dtype=dtype) / quarter
    )
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w * 2 * math.pi
    y_angles = ys[:, None] * freq[None, :]  # (h, q)
    x_angles = xs[:, None] * freq[None, :]  # (w, q)
    y_enc = torch.cat([y_angles.sin(), y_angles.cos()], dim=1)  # (h, dim/2)
    x_enc = torch.cat([x_angles.sin(), x_angles.cos()], dim=1)  # (w, dim/2)
    grid = torch.cat(
        [
            y_enc[:, None, :].expand(h, w, dim // 2),
            x_enc[None, :, :].expand(h, w, dim // 2),
        ],
        dim=2,
    )
    return grid.reshape(h * w, dim)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x + self.fc2(F.gelu(self.fc1(x), approximate="tanh")))


class CrossAttentionBlock(nn.Module):
    """LayerNorm(x + MHA(query=x + pos, key=p, value=p)).

    Positional information is added to the query side only; prototypes stay
    unordered, so permuting them leaves the output unchanged.
    """

    def __init__(self, dim: int, heads: int, with_ffn: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim) if with_ffn else None

    def forward(self, x, prototypes, pos=None, key_padding_mask=None, need_weights=False):
        """x: (B, N, d); prototypes: (B, M, d); pos: (N, d) or None."""
        q = x if pos is None else x + pos
        out, weights = self.attn(
            q,
            prototypes,
            prototypes,
            key_padding_mask=key_padding_mask,
            need_weights=need_weights,
        )
        x = self.norm(x + out)
        if self.ffn is not None:
            x = self.ffn(x)
        return (x, weights) if need_weights else x


def deformable_sampling(
    value: torch.Tensor,
    locations: torch.Tensor,
    attn: torch.Tensor,
    h: int,
    w: int,
) -> torch.Tensor:
    """Sample per-head value maps at normalized locations and mix by attention.

    value: (B, N, heads, hd) with N == h*w; locations: (B, N, heads, P, 2) in
    [0, 1] image-normalized coordinates (out of bounds reads zero); attn:
    (B, N, heads, P) weights. Returns (B, N, heads * hd).
    """
    b, n, heads, hd = value.shape
    p = locations.shape[3]
    vmaps = value.permute(0, 2, 3, 1).reshape(b * heads, hd, h, w)
    grid = locations.permute(0, 2, 1, 3, 4).reshape(b * heads, n, p, 2) * 2.0 - 1.0
    sampled = F.grid_sample(
        vmaps, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )  # (B*heads, hd, N, P)
    weights = attn.permute(0, 2, 1, 3).reshape(b * heads, 1, n, p)
    mixed = (sampled * weights).sum(dim=-1)  # (B*heads, hd, N)
    return mixed.reshape(b, heads, hd, n).permute(0, 3, 1, 2).reshape(b, n, heads * hd)


class DeformableBlock(nn.Module):
    """Single-scale deformable attention with per-cell predicted offsets.

    Each cell predicts, per head, ``points`` 2-D offsets and attention
    weights from its own query vector; offsets are in normalized units
    scaled by 1/max(h, w) around the cell's own center. Offset and weight
    heads start at zero so the block begins as a local identity lookup.
    """

    def __init__(self, dim: int, heads: int, points: int = 4, with_ffn: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.points = points
        self.head_dim = dim // heads
        self.value_proj = nn.Linear(dim, dim)
        self.offset_head = nn.Linear(dim, heads * points * 2)
        self.weight_head = nn.Linear(dim, heads * points)
        self.out_proj = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim) if with_ffn else None
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.offset_head.bias)
        nn.init.zeros_(self.weight_head.weight)
        nn.init.zeros_(self.weight_head.bias)

    @staticmethod
    def reference_points(h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
        """Normalized cell centers, (h*w, 2) as (x, y)."""
        ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx, gy], dim=-1).reshape(h * w, 2)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """x: (B, h*w, d) -> same shape."""
        b, n, d = x.shape
        value = self.value_proj(x).reshape(b, n, self.heads, self.head_dim)
        offsets = self.offset_head(x).reshape(b, n, self.heads, self.points, 2)
        ref = self.reference_points(h, w, device=x.device, dtype=x.dtype)
        locations = ref.reshape(1, n, 1, 1, 2) + offsets / max(h, w)
        attn = self.weight_head(x).reshape(b, n, self.heads, self.points)
        attn = F.softmax(attn, dim=-1)
        mixed = deformable_sampling(value, locations, attn, h, w)
        x = self.norm(x + self.out_proj(mixed))
        if self.ffn is not None:
            x = self.ffn(x)
        return x


class ScaleQueryEncoder(nn.Module):
    """Cross-attention seeding followed by deformable refinement at one scale."""

    def __init__(
        self,
        dim: int,
        heads: int,
        n_cross: int,
        n_deform: int,
        deform_points: int = 4,
        with_ffn: bool = False,
    ):
        super().__init__()
        self.cross_blocks = nn.ModuleList(
            CrossAttentionBlock(dim, heads, with_ffn) for _ in range(n_cross)
        )
        self.deform_blocks = nn.ModuleList(
            DeformableBlock(dim, heads, deform_points, with_ffn) for _ in range(n_deform)
        )
        self.dim = dim

    def cross_attend(self, x, prototypes, pos=None, key_padding_mask=None):
        for block in self.cross_blocks:
            x = block(x, prototypes, pos=pos, key_padding_mask=key_padding_mask)
        return x

    def deformable_refine(self, x, h, w):
        for block in self.deform_blocks:
            x = block(x, h, w)
        return x

    def forward(
        self,
        fmap: torch.Tensor,
        prototypes: torch.Tensor,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """fmap: (B, d, h, w); prototypes: (B, M, d) -> (B, d, h, w)."""
        b, d, h, w = fmap.shape
        x = fmap.flatten(2).transpose(1, 2)  # (B, h*w, d)
        pos = sincos_position_encoding(h, w, d, device=x.device, dtype=x.dtype)
        x = self.cross_attend(x, prototypes, pos=pos, key_padding_mask=key_padding_mask)
        x = self.deformable_refine(x, h, w)
        return x.transpose(1, 2).reshape(b, d, h, w)
