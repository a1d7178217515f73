"""Annotation I/O and the image preprocessing pipeline.

Annotations serialize to one JSON file per split with PNG images alongside.
Preprocessing covers the fixed-resolution eval rule (downscale so the mean
exemplar side fits under the size cap, then zero-pad bottom-right) and the
training-time random scale augmentation.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .geometry import Box
from .synth import SceneAnnotation

# Eval-time cap on the average exemplar side at the reference 1024 input;
# scales proportionally with the configured input size.
EXEMPLAR_SIZE_CAP = 80.0
REFERENCE_INPUT = 1024.0


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ValueError(f"annotation field '{key}' missing in {where}")
    return mapping[key]


def save_annotations(scenes: list[SceneAnnotation], path, image_dir=None) -> None:
    """Write one split: JSON at ``path``, PNGs under ``image_dir``.

    ``image_dir`` defaults to an ``images/`` directory next to the JSON.
    """
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for scene in scenes:
        fname = f"{scene.image_id}.png"
        arr = np.clip(scene.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        tmp = image_dir / (fname + ".tmp")
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, image_dir / fname)
        records.append(
            {
                "id": scene.image_id,
                "file": str((image_dir / fname).relative_to(path.parent)),
                "width": int(scene.image.shape[1]),
                "height": int(scene.image.shape[0]),
                "instances": [
                    {"box": [float(v) for v in b.astuple()], "class": int(c)}
                    for b, c in scene.instances
                ],
                "exemplar_ids": [int(i) for i in scene.exemplar_ids],
                "target_class": int(scene.target_class),
            }
        )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump({"images": records}, f, indent=1)
    os.replace(tmp, path)


def load_annotations(path) -> list[SceneAnnotation]:
    """Load a split written by :func:`save_annotations`."""
    path = Path(path)
    with open(path) as f:
        raw = json.load(f)
    images = _require(raw, "images", str(path))
    scenes = []
    for i, rec in enumerate(images):
        where = f"{path} images[{i}]"
        image_id = _require(rec, "id", where)
        file = _require(rec, "file", where)
        width = _require(rec, "width", where)
        height = _require(rec, "height", where)
        instances_raw = _require(rec, "instances", where)
        exemplar_ids = _require(rec, "exemplar_ids", where)
        target_class = _require(rec, "target_class", where)
        img_path = path.parent / file
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[0] != height or arr.shape[1] != width:
            raise ValueError(f"{where}: image size {arr.shape[:2]} != header {height, width}")
        instances = []
        for j, inst in enumerate(instances_raw):
            box = _require(inst, "box", f"{where} instances[{j}]")
            cls = _require(inst, "class", f"{where} instances[{j}]")
            instances.append((Box(*[float(v) for v in box]), int(cls)))
        for idx in exemplar_ids:
            if not (0 <= idx < len(instances)):
                raise ValueError(f"{where}: exemplar id {idx} out of range")
        scenes.append(
            SceneAnnotation(
                image=arr,
                instances=instances,
                exemplar_ids=[int(i) for i in exemplar_ids],
                target_class=int(target_class),
                image_id=str(image_id),
            )
        )
    return scenes


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) float image."""
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


@dataclass
class PreparedImage:
    """Network-ready tensor plus the bookkeeping to map boxes back."""

    image: np.ndarray  # (input, input, 3) float32
    exemplar_boxes: list[Box]  # in padded/scaled coordinates
    scale: float  # original -> input coordinate factor (always <= 1)


def rescale_and_pad(
    image: np.ndarray, exemplars: list[Box], input_size: tuple[int, int]
) -> PreparedImage:
    """Fixed-resolution eval preprocessing.

    Downscales (never upscales) so the mean exemplar width/height falls
    under the size cap proportional to the input resolution, then zero-pads
    bottom-right to ``input_size``, keeping the content origin at top-left.
    """
    if not exemplars:
        raise ValueError("at least one exemplar box is required")
    h0, w0 = input_size
    cap = EXEMPLAR_SIZE_CAP * min(h0, w0) / REFERENCE_INPUT
    avg_w = float(np.mean([b.width for b in exemplars]))
    avg_h = float(np.mean([b.height for b in exemplars]))
    s = min(1.0, cap / max(avg_w, avg_h, 1e-6))
    h, w = image.shape[:2]
    fit = min(h0 / (h * s), w0 / (w * s), 1.0)
    if fit < 1.0:
        warnings.warn(
            f"image {w}x{h} exceeds input {w0}x{h0} at scale {s:.3f}; shrinking further"
        )
        s *= fit
    new_h = min(max(int(round(h * s)), 1), h0)
    new_w = min(max(int(round(w * s)), 1), w0)
    sy, sx = new_h / h, new_w / w
    resized = image if (new_h, new_w) == (h, w) else _resize_image(image, new_h, new_w)
    canvas = np.zeros((h0, w0, 3), dtype=np.float32)
    canvas[:new_h, :new_w] = resized
    boxes = [Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy) for b in exemplars]
    return PreparedImage(image=canvas, exemplar_boxes=boxes, scale=float(min(sx, sy)))


def _transform_scene(
    scene: SceneAnnotation, s: float, dx: float, dy: float, input_size: tuple[int, int]
) -> tuple[np.ndarray, list[tuple[Box, int, int]]]:
    """Scale by s, shift by (dx, dy), crop/pad to input_size.

    Returns the new image and surviving instances as (box, class, original
    index); instances losing more than 70% of their area are dropped.
    """
    h0, w0 = input_size
    h, w = scene.image.shape[:2]
    new_h, new_w = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
    sy, sx = new_h / h, new_w / w
    resized = scene.image if (new_h, new_w) == (h, w) else _resize_image(scene.image, new_h, new_w)
    canvas = np.zeros((h0, w0, 3), dtype=np.float32)
    src_x1, src_y1 = max(0, int(round(dx))), max(0, int(round(dy)))
    copy_w = min(new_w - src_x1, w0)
    copy_h = min(new_h - src_y1, h0)
    if copy_w > 0 and copy_h > 0:
        canvas[:copy_h, :copy_w] = resized[src_y1 : src_y1 + copy_h, src_x1 : src_x1 + copy_w]
    kept = []
    for idx, (box, cls) in enumerate(scene.instances):
        x1, y1 = box.x1 * sx - src_x1, box.y1 * sy - src_y1
        x2, y2 = box.x2 * sx - src_x1, box.y2 * sy - src_y1
        cx1, cy1 = min(max(x1, 0.0), float(w0)), min(max(y1, 0.0), float(h0))
        cx2, cy2 = min(max(x2, 0.0), float(w0)), min(max(y2, 0.0), float(h0))
        area = (x2 - x1) * (y2 - y1)
        clipped_area = (cx2 - cx1) * (cy2 - cy1)
        if area <= 0 or clipped_area < 0.3 * area or clipped_area <= 0:
            continue
        kept.append((Box(cx1, cy1, cx2, cy2), cls, idx))
    return canvas, kept


def scale_augment(
    scene: SceneAnnotation,
    rng: np.random.Generator,
    input_size: tuple[int, int],
    scale_range: tuple[float, float] = (0.5, 1.5),
    max_tries: int = 4,
) -> SceneAnnotation:
    """Random uniform rescale then crop/pad to the training input size.

    Retries (then falls back to identity scale) whenever an exemplar
    instance would be cropped away, so every augmented sample keeps its
    full exemplar set.
    """
    h0, w0 = input_size
    h, w = scene.image.shape[:2]
    for attempt in range(max_tries + 1):
        if attempt < max_tries:
            s = float(rng.uniform(*scale_range))
        else:
            s = 1.0
        new_h, new_w = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
        dx = rng.uniform(0, max(new_w - w0, 0)) if new_w > w0 else 0.0
        dy = rng.uniform(0, max(new_h - h0, 0)) if new_h > h0 else 0.0
        canvas, kept = _transform_scene(scene, s, dx, dy, input_size)
        index_map = {orig: i for i, (_, _, orig) in enumerate(kept)}
        if all(e in index_map for e in scene.exemplar_ids):
            return SceneAnnotation(
                image=canvas,
                instances=[(b, c) for b, c, _ in kept],
                exemplar_ids=[index_map[e] for e in scene.exemplar_ids],
                target_class=scene.target_class,
                image_id=scene.image_id,
            )
    raise RuntimeError(f"augmentation failed to keep exemplars for {scene.image_id}")


def pad_to_input(scene: SceneAnnotation, input_size: tuple[int, int]) -> SceneAnnotation:
    """Deterministic identity-scale variant of :func:`scale_augment`."""
    canvas, kept = _transform_scene(scene, 1.0, 0.0, 0.0, input_size)
    index_map = {orig: i for i, (_, _, orig) in enumerate(kept)}
    return SceneAnnotation(
        image=canvas,
        instances=[(b, c) for b, c, _ in kept],
        exemplar_ids=[index_map[e] for e in scene.exemplar_ids if e in index_map],
        target_class=scene.target_class,
        image_id=scene.image_id,
    )
