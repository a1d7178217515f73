"""Training loop: AdamW on the mined detection loss, per-epoch validation
with score-threshold calibration, best-val-MAE checkpointing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import pad_to_input, scale_augment
from .losses import average_object_size, build_targets, detection_loss, total_loss
from .model import CountingModel, ModelConfig, save_checkpoint, load_checkpoint
from .synth import SceneAnnotation

TAU_FRACTIONS = tuple(np.arange(0.05, 0.96, 0.05).round(2))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 5e-5
    seed: int = 0
    augment: bool = True
    eval_every: int = 1  # epochs between val calibrations
    log_every: int = 1  # steps between CSV rows


@dataclass
class TrainState:
    model: CountingModel
    tau: float
    step: int
    best_val_mae: float
    metrics_rows: list = field(default_factory=list)


def _prepare_batch(scenes, model_cfg: ModelConfig, rng, augment: bool):
    """Augment/pad scenes and build tensors + per-image targets."""
    input_size = model_cfg.image_size
    images, exemplars, targets, avg_sizes, ids = [], [], [], [], []
    for scene in scenes:
        sample = scale_augment(scene, rng, input_size) if augment else pad_to_input(scene, input_size)
        gt = sample.target_boxes()
        images.append(torch.from_numpy(sample.image).permute(2, 0, 1))
        exemplars.append(torch.tensor([b.astuple() for b in sample.exemplar_boxes]))
        targets.append(build_targets(gt, model_cfg.grid_size, input_size, model_cfg.sigma_scale))
        avg_sizes.append(average_object_size(gt, model_cfg.size_metric))
        ids.append(sample.image_id)
    return torch.stack(images), exemplars, targets, avg_sizes, ids


def train_step(model, optimizer, batch, model_cfg: ModelConfig):
    """One optimizer step; returns per-step logging scalars."""
    images, exemplars, targets, avg_sizes, ids = batch
    gates = [s < model_cfg.size_gate for s in avg_sizes]
    use_aux = model_cfg.aux_weight > 0 and any(gates)
    result = model(images, exemplars, with_aux=use_aux)
    per_image, mains, auxes = [], [], []
    for i in range(len(ids)):
        main_i, comps = detection_loss(
            result.main[i],
            targets[i],
            mining_ratio=model_cfg.mining_ratio,
            mining_floor=model_cfg.mining_floor,
            box_weight=model_cfg.box_loss_weight,
            image_size=model_cfg.image_size,
        )
        aux_i = None
        if use_aux and gates[i]:
            aux_i, _ = detection_loss(
                result.aux[i],
                targets[i],
                mining_ratio=model_cfg.mining_ratio,
                mining_floor=model_cfg.mining_floor,
                box_weight=model_cfg.box_loss_weight,
                image_size=model_cfg.image_size,
            )
            auxes.append(float(aux_i.detach()))
        mains.append(float(main_i.detach()))
        per_image.append(
            total_loss(main_i, aux_i, avg_sizes[i], model_cfg.aux_weight, model_cfg.size_gate)
        )
    loss = torch.stack(per_image).mean()
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss {float(loss)} on batch {ids}; "
            f"per-image mains={mains} auxes={auxes}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    max_obj = max(float(r.objectness.detach().max()) for r in result.main)
    return {
        "loss_total": float(loss.detach()),
        "loss_main": float(np.mean(mains)),
        "loss_aux": float(np.mean(auxes)) if auxes else 0.0,
        "aux_gate_rate": float(np.mean(gates)),
        "max_objectness": max_obj,
    }


def calibrate_tau(records, max_train_score: float, fractions=TAU_FRACTIONS):
    """Pick the swept threshold maximizing val F1 (IoU 0.5 greedy matching).

    ``records`` come from evaluate.run_inference at a floor threshold; the
    greedy-NMS prefix property makes filtering kept boxes by score
    equivalent to re-running extraction per threshold.
    """
    from .evaluate import f1_of_records

    base = max(max_train_score, 1e-6)
    taus = [float(f) * base for f in fractions]
    f1s = [f1_of_records(records, tau) for tau in taus]
    best = int(np.argmax(f1s))
    return taus[best], f1s[best], list(zip(taus, f1s))


def train(
    train_scenes: list[SceneAnnotation],
    val_scenes: list[SceneAnnotation],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_checkpoint,
    resume=None,
    log=None,
) -> TrainState:
    """Train and keep the best-val-MAE checkpoint at ``out_checkpoint``.

    The calibrated score threshold rides along in the checkpoint. Metrics
    rows (split, metric, value, step) accumulate in the returned state.
    """
    from .evaluate import counts_of_records, run_inference

    torch.manual_seed(train_cfg.seed)
    torch.set_flush_denormal(True)  # zero-init offset heads otherwise crawl on CPU
    if resume is not None:
        model, tau, step, _ = load_checkpoint(resume)
    else:
        model = CountingModel(model_cfg)
        tau, step = 0.0, 0
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=train_cfg.lr,
        weight_decay=train_cfg.weight_decay,
        foreach=True,
    )
    rng = np.random.default_rng((train_cfg.seed, 7))
    rows: list = []
    best_mae = float("inf")
    saved = False
    max_train_score = 1e-6

    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_scenes))
        epoch_max = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch = _prepare_batch(
                [train_scenes[i] for i in idx], model_cfg, rng, train_cfg.augment
            )
            stats = train_step(model, optimizer, batch, model_cfg)
            epoch_max = max(epoch_max, stats["max_objectness"])
            step += 1
            if step % train_cfg.log_every == 0:
                for key in ("loss_total", "loss_main", "loss_aux", "aux_gate_rate"):
                    rows.append(("train", key, stats[key], step))
        max_train_score = max(epoch_max, 1e-6)

        if epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs:
            floor = 0.04 * max_train_score
            records = run_inference(model, val_scenes, floor=floor)
            epoch_tau, f1, _ = calibrate_tau(records, max_train_score)
            gt, pred = counts_of_records(records, epoch_tau)
            diff = np.asarray(gt, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
            mae = float(np.mean(np.abs(diff)))
            rmse = float(np.sqrt(np.mean(diff**2)))
            rows.append(("val", "mae", mae, step))
            rows.append(("val", "rmse", rmse, step))
            rows.append(("val", "f1", f1, step))
            rows.append(("val", "tau", epoch_tau, step))
            if log:
                log(
                    f"epoch {epoch:3d} step {step:5d} "
                    f"loss {stats['loss_total']:.4f} val MAE {mae:.3f} "
                    f"RMSE {rmse:.3f} F1 {f1:.3f} tau {epoch_tau:.4f}"
                )
            if mae < best_mae:
                best_mae = mae
                tau = epoch_tau
                save_checkpoint(
                    out_checkpoint,
                    model,
                    tau,
                    step,
                    extra={"val_mae": mae, "val_rmse": rmse, "max_train_score": max_train_score},
                )
                saved = True

    if not saved:
        save_checkpoint(out_checkpoint, model, tau, step, extra={})
    return TrainState(model=model, tau=tau, step=step, best_val_mae=best_mae, metrics_rows=rows)
