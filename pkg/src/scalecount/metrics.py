"""Counting (MAE/RMSE) and detection (AP/AP50) evaluation."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, DetectionSet, iou_matrix

COCO_IOU_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)


def mae_rmse(gt_counts: Sequence[int], pred_counts: Sequence[int]) -> tuple[float, float]:
    """Mean absolute and root mean squared count error over images."""
    if len(gt_counts) != len(pred_counts):
        raise ValueError(
            f"count list length mismatch: {len(gt_counts)} vs {len(pred_counts)}"
        )
    if len(gt_counts) == 0:
        raise ValueError("empty count lists")
    diff = np.asarray(gt_counts, dtype=np.float64) - np.asarray(pred_counts, dtype=np.float64)
    mae = float(np.mean(np.abs(diff)))
    rmse = float(np.sqrt(np.mean(diff**2)))
    return mae, rmse


def _flatten(preds: Sequence[DetectionSet], gts: Sequence[list[Box]]):
    """Collect (image_idx, score, xyxy) across images, gt xyxy per image."""
    pred_rows = []
    for i, dset in enumerate(preds):
        for j, b in enumerate(dset.boxes):
            if b.score is None:
                raise ValueError("predictions must carry scores")
            pred_rows.append((i, j, float(b.score), b.astuple()))
    gt_arrays = [
        np.array([b.astuple() for b in g], dtype=np.float64).reshape(-1, 4) for g in gts
    ]
    return pred_rows, gt_arrays


def _match_flags(pred_rows, gt_arrays, iou_thr: float) -> tuple[np.ndarray, int]:
    """Greedy score-descending matching; each gt used at most once.

    Returns the TP/FP flag per prediction (in global score order) and the
    total number of ground-truth boxes.
    """
    order = sorted(range(len(pred_rows)), key=lambda k: (-pred_rows[k][2], pred_rows[k][0], pred_rows[k][1]))
    matched = [np.zeros(len(g), dtype=bool) for g in gt_arrays]
    tp = np.zeros(len(pred_rows), dtype=bool)
    for rank, k in enumerate(order):
        img, _, _, xyxy = pred_rows[k]
        g = gt_arrays[img]
        if len(g) == 0:
            continue
        overlaps = iou_matrix(np.array(xyxy).reshape(1, 4), g)[0]
        overlaps[matched[img]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_thr:
            matched[img][best] = True
            tp[rank] = True
    n_gt = sum(len(g) for g in gt_arrays)
    return tp, n_gt


def _ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated average precision."""
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # Interpolated precision: max precision at recall >= r.
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    out = np.zeros_like(RECALL_LEVELS)
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    valid = idx < len(interp)
    out[valid] = interp[idx[valid]]
    return float(np.mean(out))


def average_precision(
    preds: Sequence[DetectionSet],
    gts: Sequence[list[Box]],
    iou_thresholds: Iterable[float] = COCO_IOU_THRESHOLDS,
) -> tuple[float, float]:
    """COCO-style (AP, AP50) with greedy matching and 101-point interpolation.

    AP is averaged over ``iou_thresholds`` (default 0.50:0.05:0.95); AP50 is
    the value at IoU 0.50. Raises if there is no ground truth anywhere.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same images")
    pred_rows, gt_arrays = _flatten(preds, gts)
    n_gt = sum(len(g) for g in gt_arrays)
    if n_gt == 0:
        raise ValueError("AP undefined: no ground-truth boxes in any image")
    aps = {}
    for thr in iou_thresholds:
        tp, _ = _match_flags(pred_rows, gt_arrays, float(thr))
        aps[round(float(thr), 2)] = _ap_from_flags(tp, n_gt)
    ap = float(np.mean(list(aps.values())))
    ap50 = aps.get(0.5)
    if ap50 is None:
        tp, _ = _match_flags(pred_rows, gt_arrays, 0.5)
        ap50 = _ap_from_flags(tp, n_gt)
    return ap, float(ap50)


def match_counts(
    preds: Sequence[DetectionSet],
    gts: Sequence[list[Box]],
    score_threshold: float,
    iou_thr: float = 0.5,
) -> tuple[int, int, int]:
    """(TP, FP, FN) after filtering predictions by score >= threshold."""
    kept = [
        DetectionSet(boxes=[b for b in d.boxes if b.score is not None and b.score >= score_threshold],
                     image_id=d.image_id)
        for d in preds
    ]
    pred_rows, gt_arrays = _flatten(kept, gts)
    tp_flags, n_gt = _match_flags(pred_rows, gt_arrays, iou_thr)
    tp = int(tp_flags.sum())
    fp = len(pred_rows) - tp
    fn = n_gt - tp
    return tp, fp, fn


def f1_at_threshold(
    preds: Sequence[DetectionSet],
    gts: Sequence[list[Box]],
    score_threshold: float,
    iou_thr: float = 0.5,
) -> float:
    """F1 of greedy IoU matching after score filtering; 0 when nothing matches."""
    tp, fp, fn = match_counts(preds, gts, score_threshold, iou_thr)
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def write_metrics_csv(rows: Iterable[tuple], path) -> None:
    """Write (split, metric, value, step) rows with a header (atomically)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["split", "metric", "value", "step"])
        for row in rows:
            writer.writerow(list(row))
    os.replace(tmp, path)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
