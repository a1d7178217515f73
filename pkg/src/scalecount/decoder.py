"""Dense query decoding: objectness / box heads and detection extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box, DetectionSet, decode_tlrb_map, local_maxima, nms


@dataclass
class DenseOutputs:
    """Per-cell objectness (H, W) and tlrb box map (H, W, 4) in sigmoid range."""

    objectness: torch.Tensor
    boxes_tlrb: torch.Tensor

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.objectness.detach().cpu().double().numpy(),
            self.boxes_tlrb.detach().cpu().double().numpy(),
        )


class ObjectnessHead(nn.Module):
    """Single linear layer over channels followed by LeakyReLU."""

    def __init__(self, dim: int, negative_slope: float = 0.01):
        super().__init__()
        self.linear = nn.Linear(dim, 1)
        self.negative_slope = negative_slope

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        """q: (B, d, H, W) -> (B, H, W)."""
        b, d, h, w = q.shape
        flat = q.flatten(2).transpose(1, 2)  # (B, HW, d)
        out = F.leaky_relu(self.linear(flat), negative_slope=self.negative_slope)
        return out.reshape(b, h, w)


class BoxHead(nn.Module):
    """Three-layer MLP (d -> d -> d -> 4) with GeLU between, sigmoid output."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, 4)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        """q: (B, d, H, W) -> (B, H, W, 4) in (0, 1)."""
        b, d, h, w = q.shape
        flat = q.flatten(2).transpose(1, 2)
        x = F.gelu(self.fc1(flat), approximate="tanh")
        x = F.gelu(self.fc2(x), approximate="tanh")
        return torch.sigmoid(self.fc3(x)).reshape(b, h, w, 4)


class DenseHeads(nn.Module):
    def __init__(self, dim: int, negative_slope: float = 0.01):
        super().__init__()
        self.objectness = ObjectnessHead(dim, negative_slope)
        self.boxes = BoxHead(dim)

    def forward(self, q: torch.Tensor) -> list[DenseOutputs]:
        obj = self.objectness(q)
        tlrb = self.boxes(q)
        return [DenseOutputs(obj[i], tlrb[i]) for i in range(q.shape[0])]


def extract_detections(
    objectness: np.ndarray,
    boxes_tlrb: np.ndarray,
    threshold: float,
    image_size,
    nms_iou: float = 0.5,
    image_id: str = "",
) -> DetectionSet:
    """Local maxima -> tlrb decode -> NMS.

    ``objectness`` (H, W) scores and ``boxes_tlrb`` (H, W, 4) come from the
    decoder heads; detections score above ``threshold``, beat their 8
    neighbors, and survive greedy NMS. Deterministic.
    """
    h, w = objectness.shape
    peaks = local_maxima(objectness, threshold)
    if not peaks:
        return DetectionSet(boxes=[], image_id=image_id)
    locs = np.array(peaks, dtype=np.int64)
    tlrb = boxes_tlrb[locs[:, 0], locs[:, 1]]
    xyxy = decode_tlrb_map(locs, tlrb, (h, w), image_size)
    scores = objectness[locs[:, 0], locs[:, 1]]
    dets = DetectionSet(
        boxes=[
            Box(*map(float, xyxy[i]), score=float(scores[i])) for i in range(len(peaks))
        ],
        image_id=image_id,
    )
    return nms(dets, nms_iou)


def extract_from_outputs(
    outs: DenseOutputs,
    threshold: float,
    image_size,
    nms_iou: float = 0.5,
    image_id: str = "",
) -> DetectionSet:
    obj, tlrb = outs.numpy()
    return extract_detections(obj, tlrb, threshold, image_size, nms_iou, image_id)


def refine_boxes(dets: DetectionSet) -> DetectionSet:
    """Identity refinement; interface point for mask-based box fitting."""
    return dets
