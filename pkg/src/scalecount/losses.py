"""Detection-oriented counting loss with hard-negative mining.

Targets are per-cell Gaussians peaking at object centers; the objectness
term is squared error averaged over positive cells plus the hardest
negatives, and positive cells additionally pay a GIoU box term. An
auxiliary copy of the same loss from the small-object branch is gated on
the image's average object size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .decoder import DenseOutputs
from .geometry import Box, encode_tlrb


@dataclass
class TrainingTargets:
    objectness: np.ndarray  # (H, W) in [0, 1]
    boxes_tlrb: np.ndarray  # (H, W, 4), defined at positive cells
    positive_mask: np.ndarray  # (H, W) bool, one center cell per object
    gt_boxes: list[Box] = field(default_factory=list)


def build_targets(
    gt_boxes: list[Box], query_map_size, image_size, sigma_scale: float = 0.5
) -> TrainingTargets:
    """Gaussian objectness targets plus per-center tlrb regression targets.

    Each object contributes an unnormalized Gaussian at its center with
    sigma = sigma_scale * min(w, h) / 2 in grid units; the map takes the
    max over objects and is forced to exactly 1 at each object's center
    cell. When two objects share a center cell the smaller-area object
    keeps the cell.
    """
    h, w = query_map_size
    h0, w0 = image_size
    obj = np.zeros((h, w), dtype=np.float64)
    tlrb = np.zeros((h, w, 4), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    owner_area = np.full((h, w), np.inf)
    if gt_boxes:
        rows = (np.arange(h) + 0.5)[:, None]
        cols = (np.arange(w) + 0.5)[None, :]
        for box in gt_boxes:
            cx, cy = box.center
            gx = cx * w / w0  # grid units
            gy = cy * h / h0
            gw = box.width * w / w0
            gh = box.height * h / h0
            sigma = max(sigma_scale * min(gw, gh) / 2.0, 1e-3)
            g = np.exp(-((cols - gx) ** 2 + (rows - gy) ** 2) / (2.0 * sigma**2))
            np.maximum(obj, g, out=obj)
            (r, c), code = encode_tlrb(box, query_map_size, image_size)
            if box.area < owner_area[r, c]:
                owner_area[r, c] = box.area
                tlrb[r, c] = code
            mask[r, c] = True
        obj[mask] = 1.0
    return TrainingTargets(
        objectness=obj, boxes_tlrb=tlrb, positive_mask=mask, gt_boxes=list(gt_boxes)
    )


def decode_tlrb_torch(
    locs: torch.Tensor, tlrb: torch.Tensor, query_map_size, image_size
) -> torch.Tensor:
    """Differentiable counterpart of geometry.decode_tlrb_map.

    locs: (N, 2) integer (row, col); tlrb: (N, 4) -> (N, 4) xyxy clamped to
    the image.
    """
    h, w = query_map_size
    h0, w0 = image_size
    xc = (locs[:, 1].to(tlrb.dtype) + 0.5) * (w0 / w)
    yc = (locs[:, 0].to(tlrb.dtype) + 0.5) * (h0 / h)
    x1 = (xc - tlrb[:, 1] * w0).clamp(0, w0)
    y1 = (yc - tlrb[:, 0] * h0).clamp(0, h0)
    x2 = (xc + tlrb[:, 2] * w0).clamp(0, w0)
    y2 = (yc + tlrb[:, 3] * h0).clamp(0, h0)
    return torch.stack([x1, y1, x2, y2], dim=1)


def giou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean (1 - GIoU) over (N, 4) xyxy box pairs."""
    ix = torch.minimum(pred[:, 2], target[:, 2]) - torch.maximum(pred[:, 0], target[:, 0])
    iy = torch.minimum(pred[:, 3], target[:, 3]) - torch.maximum(pred[:, 1], target[:, 1])
    inter = ix.clamp(min=0) * iy.clamp(min=0)
    area_p = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
    area_t = (target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1])
    union = area_p + area_t - inter
    iou = inter / union.clamp(min=1e-9)
    ex = torch.maximum(pred[:, 2], target[:, 2]) - torch.minimum(pred[:, 0], target[:, 0])
    ey = torch.maximum(pred[:, 3], target[:, 3]) - torch.minimum(pred[:, 1], target[:, 1])
    enclosure = (ex * ey).clamp(min=1e-9)
    giou = iou - (enclosure - union) / enclosure
    return (1.0 - giou).mean()


def select_hard_negatives(errors: torch.Tensor, negative_mask: torch.Tensor, k: int) -> torch.Tensor:
    """Flat indices of the k largest-error negatives, raster order on ties."""
    flat_err = errors.reshape(-1)
    flat_neg = negative_mask.reshape(-1)
    neg_idx = torch.nonzero(flat_neg, as_tuple=False).squeeze(1)
    k = min(k, int(neg_idx.numel()))
    if k == 0:
        return neg_idx[:0]
    # Stable sort keeps raster order among equal errors.
    order = torch.argsort(flat_err[neg_idx], descending=True, stable=True)
    return neg_idx[order[:k]]


def detection_loss(
    outs: DenseOutputs,
    targets: TrainingTargets,
    mining_ratio: int = 3,
    mining_floor: int = 16,
    box_weight: float = 1.0,
    image_size=None,
) -> tuple[torch.Tensor, dict]:
    """Counting-oriented detection loss for one image.

    Objectness: squared error against the Gaussian target, averaged over
    positive cells plus the top-(mining_ratio * #positives) highest-error
    negatives (at least ``mining_floor`` when there are no positives).
    Box: GIoU between boxes decoded at positive cells, weighted by
    ``box_weight``.
    """
    pred_obj = outs.objectness
    h, w = pred_obj.shape
    if image_size is None:
        image_size = (2 * h, 2 * w)
    device, dtype = pred_obj.device, pred_obj.dtype
    target_obj = torch.as_tensor(targets.objectness, device=device, dtype=dtype)
    pos_mask = torch.as_tensor(targets.positive_mask, device=device)
    errors = (pred_obj - target_obj) ** 2
    n_pos = int(pos_mask.sum())
    k = mining_ratio * n_pos if n_pos > 0 else mining_floor
    neg_idx = select_hard_negatives(errors.detach(), ~pos_mask, k)
    mined = errors.reshape(-1)[neg_idx]
    pos_err = errors[pos_mask]
    denom = max(n_pos + int(neg_idx.numel()), 1)
    obj_term = (pos_err.sum() + mined.sum()) / denom

    if n_pos > 0:
        locs = torch.nonzero(pos_mask, as_tuple=False)
        pred_tlrb = outs.boxes_tlrb[locs[:, 0], locs[:, 1]]
        tgt_tlrb = torch.as_tensor(
            targets.boxes_tlrb, device=device, dtype=dtype
        )[locs[:, 0], locs[:, 1]]
        pred_boxes = decode_tlrb_torch(locs, pred_tlrb, (h, w), image_size)
        tgt_boxes = decode_tlrb_torch(locs, tgt_tlrb, (h, w), image_size)
        box_term = giou_loss(pred_boxes, tgt_boxes)
    else:
        box_term = pred_obj.new_zeros(())

    total = obj_term + box_weight * box_term
    components = {
        "objectness": float(obj_term.detach()),
        "box": float(box_term.detach()),
        "num_pos": n_pos,
        "num_mined": int(neg_idx.numel()),
    }
    return total, components


def average_object_size(boxes: list[Box], metric: str = "max_side") -> float:
    """Mean object extent in pixels; +inf for an empty list (gate stays shut)."""
    if not boxes:
        return float("inf")
    if metric == "max_side":
        sizes = [max(b.width, b.height) for b in boxes]
    elif metric == "mean_side":
        sizes = [0.5 * (b.width + b.height) for b in boxes]
    else:
        raise ValueError(f"unknown size metric {metric!r}")
    return float(np.mean(sizes))


def total_loss(
    main: torch.Tensor,
    aux: torch.Tensor | None,
    avg_object_size: float,
    alpha: float,
    size_gate: float = 25.0,
) -> torch.Tensor:
    """main + alpha * aux when the image's objects average below the gate.

    The gate is strict (< size_gate); with alpha == 0 or no aux outputs the
    main loss is returned unchanged.
    """
    if aux is None or alpha == 0.0 or not (avg_object_size < size_gate):
        return main
    return main + alpha * aux
