"""Box geometry and detection post-processing.

Pure numpy, no framework dependencies: IoU, greedy NMS, the tlrb box
codec used by the dense decoder, and 8-neighbor local-maximum extraction.
All functions are pure and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in image pixel coordinates.

    Satisfies x1 <= x2, y1 <= y2 with finite coordinates. ``score`` is an
    optional detection confidence (>= 0).
    """

    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"degenerate box ordering: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class DetectionSet:
    """Scored boxes for one image; count is len(boxes)."""

    boxes: list[Box] = field(default_factory=list)
    image_id: str = ""

    def __len__(self) -> int:
        return len(self.boxes)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (N,4) coordinates and (N,) scores."""
        if not self.boxes:
            return np.zeros((0, 4)), np.zeros((0,))
        xyxy = np.array([b.astuple() for b in self.boxes], dtype=np.float64)
        scores = np.array(
            [0.0 if b.score is None else b.score for b in self.boxes], dtype=np.float64
        )
        return xyxy, scores


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for disjoint or zero-area input."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) xyxy arrays; zero-area rows give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    inter[(ix <= 0) | (iy <= 0)] = 0.0
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _nms_order(xyxy: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # Descending score, ties broken by ascending (y1, x1, y2, x2).
    # lexsort treats the last key as primary.
    keys = (xyxy[:, 2], xyxy[:, 3], xyxy[:, 0], xyxy[:, 1], -scores)
    return np.lexsort(keys)


def nms(dets: DetectionSet, iou_threshold: float = 0.5) -> DetectionSet:
    """Greedy non-maximum suppression in descending score order.

    A box is kept iff its IoU with every previously kept box is
    <= ``iou_threshold``. Deterministic: score ties are broken by
    ascending (y1, x1, y2, x2). Idempotent.
    """
    if any(b.score is None for b in dets.boxes):
        raise ValueError("nms requires all boxes to carry scores")
    if not dets.boxes:
        return DetectionSet(boxes=[], image_id=dets.image_id)
    xyxy, scores = dets.arrays()
    order = _nms_order(xyxy, scores)
    kept_idx: list[int] = []
    kept_xyxy = np.zeros((len(order), 4))
    n_kept = 0
    for i in order:
        if n_kept:
            overlaps = iou_matrix(xyxy[i : i + 1], kept_xyxy[:n_kept])[0]
            if np.any(overlaps > iou_threshold):
                continue
        kept_xyxy[n_kept] = xyxy[i]
        n_kept += 1
        kept_idx.append(int(i))
    return DetectionSet(boxes=[dets.boxes[i] for i in kept_idx], image_id=dets.image_id)


def _cell_center(row: int, col: int, query_map_size, image_size) -> tuple[float, float]:
    h, w = query_map_size
    h0, w0 = image_size
    return ((col + 0.5) * w0 / w, (row + 0.5) * h0 / h)


def decode_tlrb(loc, tlrb, query_map_size, image_size, score: Optional[float] = None) -> Box:
    """Decode one grid cell's tlrb distances into an image-space box.

    ``loc`` is a (row, col) cell of an (H, W) map over an (H0, W0) image; the
    four tlrb values are distances from the cell center to the top/left/
    right/bottom edges, normalized by H0 (t, b) and W0 (l, r). The result is
    clamped to the image bounds.
    """
    row, col = loc
    h, w = query_map_size
    h0, w0 = image_size
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"cell {loc} outside {query_map_size} grid")
    t, l, r, b = tlrb
    xc, yc = _cell_center(row, col, query_map_size, image_size)
    # Non-negative distances keep x1 <= x2 and y1 <= y2 through the clamp.
    x1 = min(max(xc - l * w0, 0.0), w0)
    y1 = min(max(yc - t * h0, 0.0), h0)
    x2 = min(max(xc + r * w0, 0.0), w0)
    y2 = min(max(yc + b * h0, 0.0), h0)
    return Box(x1, y1, x2, y2, score=score)


def decode_tlrb_map(
    locs: np.ndarray, tlrb: np.ndarray, query_map_size, image_size
) -> np.ndarray:
    """Vectorized decode: (N,2) cells + (N,4) tlrb -> (N,4) xyxy, clamped."""
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 2)
    tlrb = np.asarray(tlrb, dtype=np.float64).reshape(-1, 4)
    h, w = query_map_size
    h0, w0 = image_size
    xc = (locs[:, 1] + 0.5) * w0 / w
    yc = (locs[:, 0] + 0.5) * h0 / h
    x1 = np.clip(xc - tlrb[:, 1] * w0, 0, w0)
    y1 = np.clip(yc - tlrb[:, 0] * h0, 0, h0)
    x2 = np.clip(xc + tlrb[:, 2] * w0, 0, w0)
    y2 = np.clip(yc + tlrb[:, 3] * h0, 0, h0)
    return np.stack([x1, y1, np.maximum(x1, x2), np.maximum(y1, y2)], axis=1)


def encode_tlrb(box: Box, query_map_size, image_size) -> tuple[tuple[int, int], np.ndarray]:
    """Inverse of :func:`decode_tlrb` for target construction.

    Returns the grid cell containing the box center (floor convention) and
    the tlrb distances from that cell's center to the box edges, normalized
    and clamped to [0, 1]. A zero-area box yields all-zero tlrb.
    """
    h, w = query_map_size
    h0, w0 = image_size
    cx, cy = box.center
    col = min(int(np.floor(cx * w / w0)), w - 1)
    row = min(int(np.floor(cy * h / h0)), h - 1)
    col = max(col, 0)
    row = max(row, 0)
    if box.area == 0:
        return (row, col), np.zeros(4)
    xc, yc = _cell_center(row, col, query_map_size, image_size)
    t = (yc - box.y1) / h0
    l = (xc - box.x1) / w0
    r = (box.x2 - xc) / w0
    b = (box.y2 - yc) / h0
    return (row, col), np.clip(np.array([t, l, r, b]), 0.0, 1.0)


_NEIGHBOR_SHIFTS = [
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
]
# Raster-preceding neighbors, used for the plateau tie rule.
_PRECEDING_SHIFTS = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]


def local_maxima(score_map: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Cells that are 8-neighborhood maxima with score > threshold.

    A cell qualifies when its score is >= every in-bounds neighbor and no
    neighbor of equal score precedes it in raster order (deterministic
    plateau representative). Missing neighbors at the borders count as
    -inf, so border cells can be maxima. Results in raster order.
    """
    s = np.asarray(score_map, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("score map must be 2-D")
    if not np.all(np.isfinite(s)):
        raise ValueError("score map must be finite")
    padded = np.pad(s, 1, constant_values=-np.inf)

    def shifted(dr, dc):
        return padded[1 + dr : 1 + dr + s.shape[0], 1 + dc : 1 + dc + s.shape[1]]

    qualifies = s > threshold
    for dr, dc in _NEIGHBOR_SHIFTS:
        qualifies &= s >= shifted(dr, dc)
    for dr, dc in _PRECEDING_SHIFTS:
        qualifies &= s != shifted(dr, dc)
    return [(int(r), int(c)) for r, c in np.argwhere(qualifies)]
