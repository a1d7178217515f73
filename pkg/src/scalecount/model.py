"""Composition root: backbone -> prototypes -> per-scale encoders ->
cross-scale aggregation -> dense heads, with ablation variants selected by
configuration. Also owns checkpoint serialization."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn as nn

from .aggregation import CrossScaleAggregator, UpsampleFuse
from .backbone import ConvBackbone
from .data import PreparedImage
from .decoder import DenseHeads, DenseOutputs, extract_from_outputs, refine_boxes
from .encoder import ScaleQueryEncoder
from .geometry import Box, DetectionSet
from .prototypes import PrototypeBuilder

VARIANTS = ("full", "fp", "q1_only", "q2_only", "q3_only")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_exemplars: int = 3
    num_cross_attn: int = 3
    num_deform: int = 2
    heads: int = 4
    deform_points: int = 4
    input_size: int = 256
    variant: str = "full"
    aux_weight: float = 0.3
    size_gate: float = 25.0  # px; strict upper bound for the aux loss gate
    size_metric: str = "max_side"
    nms_iou: float = 0.5
    leaky_slope: float = 0.01
    sigma_scale: float = 0.5
    mining_ratio: int = 3
    mining_floor: int = 16
    box_loss_weight: float = 1.0
    roi_pool_size: int = 3
    with_ffn: bool = False
    lum_norm: bool = False

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for the positional encoding")
        if self.input_size % 16:
            raise ValueError(f"input_size {self.input_size} not divisible by 16")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant {self.variant!r} not one of {VARIANTS}")

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.input_size, self.input_size)

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.input_size // 2, self.input_size // 2)


# Which pyramid levels get exemplar-conditioned encoding per variant; the
# remaining levels feed raw backbone features into the aggregation chain.
_ENCODED_LEVELS = {
    "full": (1, 2, 3),
    "fp": (1,),
    "q1_only": (1,),
    "q2_only": (2,),
    "q3_only": (3,),
}


@dataclass
class ForwardResult:
    main: list[DenseOutputs]
    aux: list[DenseOutputs] | None


class CountingModel(nn.Module):
    """Few-shot counter: exemplar-conditioned dense queries at three scales,
    aggregated to half input resolution and decoded into boxes + scores."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.backbone = ConvBackbone(d)
        self.prototype_builder = PrototypeBuilder(d, config.roi_pool_size)
        self.encoders = nn.ModuleList(
            ScaleQueryEncoder(
                d,
                config.heads,
                config.num_cross_attn,
                config.num_deform,
                config.deform_points,
                config.with_ffn,
            )
            for _ in range(3)
        )
        self.aggregator = CrossScaleAggregator(d, config.lum_norm)
        self.heads = DenseHeads(d, config.leaky_slope)
        self.aux_fuse = UpsampleFuse(d, config.lum_norm)
        self.aux_heads = DenseHeads(d, config.leaky_slope)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _prototypes(self, fmap, boxes_per_image, stride):
        """Per-image prototype stacks padded to a common size.

        Returns (B, 2*max_k, d) plus a key padding mask for images with
        fewer exemplars.
        """
        image_size = self.config.image_size
        stacks = [
            self.prototype_builder(fmap[i], boxes_per_image[i], stride, image_size)
            for i in range(len(boxes_per_image))
        ]
        max_rows = max(s.shape[0] for s in stacks)
        if all(s.shape[0] == max_rows for s in stacks):
            return torch.stack(stacks), None
        padded = fmap.new_zeros((len(stacks), max_rows, stacks[0].shape[1]))
        mask = torch.ones((len(stacks), max_rows), dtype=torch.bool, device=fmap.device)
        for i, s in enumerate(stacks):
            padded[i, : s.shape[0]] = s
            mask[i, : s.shape[0]] = False
        return padded, mask

    def forward(
        self,
        images: torch.Tensor,
        exemplars: list[torch.Tensor],
        with_aux: bool | None = None,
    ) -> ForwardResult:
        """images: (B, 3, H0, W0); exemplars: per-image (k_i, 4) xyxy tensors.

        Returns dense outputs at (H0/2, W0/2); the auxiliary branch is
        evaluated only in training mode (or when forced via ``with_aux``).
        """
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[0] != len(exemplars):
            raise ValueError("one exemplar set per image is required")
        h0, w0 = images.shape[-2:]
        if (h0, w0) != self.config.image_size:
            raise ValueError(
                f"input {h0}x{w0} does not match configured size {self.config.image_size}"
            )
        for i, ex in enumerate(exemplars):
            if ex.ndim != 2 or ex.shape[1] != 4 or ex.shape[0] < 1:
                raise ValueError(f"exemplars[{i}] must be (k>=1, 4), got {tuple(ex.shape)}")
        if with_aux is None:
            with_aux = self.training

        pyramid = self.backbone(images)
        levels = {1: pyramid.c1, 2: pyramid.c2, 3: pyramid.c3}
        strides = {1: 16, 2: 8, 3: 4}
        encoded = {}
        for level in (1, 2, 3):
            if level in _ENCODED_LEVELS[self.config.variant]:
                protos, mask = self._prototypes(levels[level], exemplars, strides[level])
                encoded[level] = self.encoders[level - 1](levels[level], protos, mask)
            else:
                encoded[level] = levels[level]
        fused = self.aggregator(encoded[1], encoded[2], encoded[3])
        main = self.heads(fused)
        aux = None
        if with_aux:
            aux = self.aux_heads(self.aux_fuse(encoded[3]))
        return ForwardResult(main=main, aux=aux)

    @torch.no_grad()
    def count(
        self,
        prepared: PreparedImage,
        threshold: float,
    ) -> tuple[int, DetectionSet, float]:
        """Detections for one preprocessed image at a calibrated threshold.

        Returns (count, detections in input coordinates, seconds spent in
        forward + extraction).
        """
        was_training = self.training
        self.eval()
        try:
            t0 = time.perf_counter()
            device = next(self.parameters()).device
            dtype = next(self.parameters()).dtype
            img = torch.from_numpy(prepared.image).to(device=device, dtype=dtype)
            img = img.permute(2, 0, 1)[None]
            boxes = torch.tensor(
                [b.astuple() for b in prepared.exemplar_boxes], device=device, dtype=dtype
            )
            result = self.forward(img, [boxes], with_aux=False)
            dets = extract_from_outputs(
                result.main[0],
                threshold,
                self.config.image_size,
                nms_iou=self.config.nms_iou,
            )
            dets = refine_boxes(dets)
            elapsed = time.perf_counter() - t0
        finally:
            self.train(was_training)
        return len(dets), dets, elapsed


def exemplar_tensors(prepared: PreparedImage, device=None, dtype=torch.float32):
    return torch.tensor(
        [b.astuple() for b in prepared.exemplar_boxes], device=device, dtype=dtype
    )


def save_checkpoint(
    path, model: CountingModel, tau: float, step: int, extra: dict | None = None
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state": model.state_dict(),
        "tau": float(tau),
        "step": int(step),
        "extra": dict(extra or {}),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[CountingModel, float, int, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig(**payload["config"])
    model = CountingModel(config)
    model.load_state_dict(payload["state"])
    return model, float(payload["tau"]), int(payload["step"]), payload.get("extra", {})
