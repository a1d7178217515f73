"""Variant comparison runs sharing data and seeds."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .evaluate import evaluate_split
from .model import ModelConfig
from .train import TrainConfig, train

# Named ablation variants: ModelConfig overrides applied on top of the base
# config. Architecture variants reroute the aggregation inputs; "no_aux"
# disables the small-object auxiliary loss.
ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "fp": {"variant": "fp"},
    "q1_only": {"variant": "q1_only"},
    "q2_only": {"variant": "q2_only"},
    "q3_only": {"variant": "q3_only"},
    "no_aux": {"aux_weight": 0.0},
    "alpha05": {"aux_weight": 0.5},
    "nca2": {"num_cross_attn": 2},
    "nda1": {"num_deform": 1},
}


def run_variant(
    train_scenes,
    val_scenes,
    base_model: ModelConfig,
    base_train: TrainConfig,
    variant: str,
    seed: int,
    checkpoint_path,
    log=None,
) -> dict:
    """Train one named variant with one seed and evaluate on val."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; options: {sorted(ABLATION_VARIANTS)}")
    model_cfg = replace(base_model, **ABLATION_VARIANTS[variant])
    train_cfg = replace(base_train, seed=seed)
    state = train(train_scenes, val_scenes, model_cfg, train_cfg, checkpoint_path, log=log)
    report, _, _ = evaluate_split(state.model, val_scenes, state.tau, split="val")
    return {
        "variant": variant,
        "seed": seed,
        "mae": report["mae"],
        "rmse": report["rmse"],
        "ap": report["ap"],
        "ap50": report["ap50"],
    }


def run_ablation(
    train_scenes,
    val_scenes,
    base_model: ModelConfig,
    base_train: TrainConfig,
    variants: list[str],
    seeds: list[int],
    workdir,
    log=None,
) -> list[dict]:
    """Cross product of variants x seeds; returns one metrics row per run."""
    from pathlib import Path

    rows = []
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    for variant in variants:
        for seed in seeds:
            ckpt = workdir / f"{variant}_seed{seed}.pt"
            if log:
                log(f"[ablate] training {variant} seed {seed}")
            rows.append(
                run_variant(
                    train_scenes, val_scenes, base_model, base_train, variant, seed, ckpt, log=log
                )
            )
    return rows


def aggregate_table(rows: list[dict]) -> list[dict]:
    """Mean metrics per variant over seeds, preserving first-seen order."""
    seen: list[str] = []
    for row in rows:
        if row["variant"] not in seen:
            seen.append(row["variant"])
    out = []
    for variant in seen:
        group = [r for r in rows if r["variant"] == variant]
        out.append(
            {
                "variant": variant,
                "seeds": len(group),
                **{
                    key: float(np.mean([r[key] for r in group]))
                    for key in ("mae", "rmse", "ap", "ap50")
                },
            }
        )
    return out


def table_markdown(agg: list[dict]) -> str:
    lines = [
        "| variant | seeds | MAE | RMSE | AP | AP50 |",
        "|---|---|---|---|---|---|",
    ]
    for row in agg:
        lines.append(
            f"| {row['variant']} | {row['seeds']} | {row['mae']:.3f} | "
            f"{row['rmse']:.3f} | {row['ap']:.3f} | {row['ap50']:.3f} |"
        )
    return "\n".join(lines) + "\n"
