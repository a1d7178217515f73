"""Command-line interface: gen | train | eval | infer | ablate."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation, plots
from .config import load_config
from .data import load_annotations, rescale_and_pad, save_annotations
from .evaluate import evaluate_split, write_json
from .geometry import Box
from .metrics import write_metrics_csv
from .model import load_checkpoint
from .synth import generate_scene
from .train import train

SPLIT_SEED_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def _atomic_json(payload, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1)
    os.replace(tmp, path)


def parse_boxes(spec: str) -> list[Box]:
    """Parse 'x1,y1,x2,y2[;...]' exemplar box flags."""
    boxes = []
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [float(v) for v in chunk.split(",")]
        if len(parts) != 4:
            raise ValueError(f"box needs 4 coordinates, got {chunk!r}")
        boxes.append(Box(*parts))
    if not boxes:
        raise ValueError("at least one exemplar box is required")
    return boxes


def cmd_gen(args) -> int:
    cfg = load_config(args.config, overrides={"data": {"seed": args.seed}})
    out = Path(args.out)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    unknown = set(splits) - set(SPLIT_SEED_OFFSETS)
    if unknown:
        raise SystemExit(f"unknown splits: {sorted(unknown)}")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise SystemExit(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    gen_cfg = cfg.data.generator_config()
    counts = {
        "train": cfg.data.train_images,
        "val": cfg.data.val_images,
        "test": cfg.data.test_images,
    }
    underfilled = 0
    for split in splits:
        n = counts[split]
        if n >= 1_000_000:
            raise SystemExit("split size too large for disjoint seed ranges")
        offset = SPLIT_SEED_OFFSETS[split]
        scenes = [
            generate_scene(gen_cfg, rng_seed=offset + i, image_id=f"{split}_{i:05d}")
            for i in range(n)
        ]
        underfilled += sum(s.underfilled for s in scenes)
        save_annotations(scenes, out / f"{split}.json")
        print(f"gen: wrote {n} scenes to {out / (split + '.json')}")
    _atomic_json(
        {
            "preset": cfg.data.preset,
            "seed": cfg.data.seed,
            "counts": counts,
            "generator": {
                k: list(v) if isinstance(v, tuple) else v
                for k, v in vars(gen_cfg).items()
            },
        },
        out / "gen_config.json",
    )
    if underfilled:
        print(f"gen: warning: {underfilled} scenes underfilled (placement gave up)")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "train": {"seed": args.seed, "epochs": args.epochs},
        "model": {"variant": args.variant},
    }
    cfg = load_config(args.config, overrides=overrides)
    data_dir = Path(args.data)
    train_scenes = load_annotations(data_dir / "train.json")
    val_scenes = load_annotations(data_dir / "val.json")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    state = train(
        train_scenes,
        val_scenes,
        cfg.model,
        cfg.train,
        out,
        resume=args.resume,
        log=print,
    )
    stem = out.with_suffix("")
    csv_path = Path(f"{stem}_metrics.csv")
    write_metrics_csv(state.metrics_rows, csv_path)
    plots.plot_loss_curves(state.metrics_rows, Path(f"{stem}_loss.png"))
    print(
        f"train: best val MAE {state.best_val_mae:.3f} at tau {state.tau:.4f}; "
        f"checkpoint {out}, metrics {csv_path}"
    )
    return 0


def cmd_eval(args) -> int:
    model, tau, step, _ = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    ann = data_dir / f"{args.split}.json"
    if not ann.exists():
        raise SystemExit(f"split annotation file missing: {ann}")
    scenes = load_annotations(ann)
    report, preds, records = evaluate_split(model, scenes, tau, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "report.json")
    _atomic_json(preds, out / "predictions.json")
    rows = [
        (args.split, key, report[key], step)
        for key in ("mae", "rmse", "ap", "ap50")
    ]
    if "mae_dense300" in report:
        rows.append((args.split, "mae_dense300", report["mae_dense300"], step))
    write_metrics_csv(rows, out / "metrics.csv")
    gt = [len(r.gt_boxes) for r in records]
    pred_counts = [p["count"] for p in preds]
    plots.plot_count_scatter(
        gt, pred_counts, out / "count_scatter.png", title=f"{args.split}: MAE {report['mae']:.2f}"
    )
    print(json.dumps(report, indent=1))
    return 0


def cmd_infer(args) -> int:
    from PIL import Image

    model, tau, _, _ = load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    try:
        with Image.open(image_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise SystemExit(f"cannot read image {image_path}: {exc}")
    exemplars = parse_boxes(args.boxes)
    prepared = rescale_and_pad(image, exemplars, model.config.image_size)
    n, dets, seconds = model.count(prepared, threshold=tau)
    s = prepared.scale
    boxes_orig = [
        Box(b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s, score=b.score) for b in dets.boxes
    ]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_png = Path(args.out_png) if args.out_png else out_dir / f"{image_path.stem}_overlay.png"
    out_json = (
        Path(args.out_json) if args.out_json else out_dir / f"{image_path.stem}_predictions.json"
    )
    payload = {
        "image_id": image_path.stem,
        "count": n,
        "boxes": [
            [float(b.x1), float(b.y1), float(b.x2), float(b.y2), float(b.score)]
            for b in boxes_orig
        ],
    }
    _atomic_json(payload, out_json)
    from .geometry import DetectionSet

    plots.draw_detections(
        image, DetectionSet(boxes=boxes_orig), exemplars, out_png, count=n
    )
    print(f"infer: count={n} ({seconds:.3f}s) -> {out_json}, {out_png}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, overrides={"train": {"seed": args.seed}})
    data_dir = Path(args.data)
    train_scenes = load_annotations(data_dir / "train.json")
    val_scenes = load_annotations(data_dir / "val.json")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation.run_ablation(
        train_scenes, val_scenes, cfg.model, cfg.train, variants, seeds, out / "runs", log=print
    )
    with open(out / "table.csv.tmp", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "seed", "mae", "rmse", "ap", "ap50"])
        writer.writeheader()
        writer.writerows(rows)
    os.replace(out / "table.csv.tmp", out / "table.csv")
    agg = ablation.aggregate_table(rows)
    (out / "table.md.tmp").write_text(ablation.table_markdown(agg))
    os.replace(out / "table.md.tmp", out / "table.md")
    plots.plot_ablation_bars(rows, out / "table.png")
    print(ablation.table_markdown(agg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalecount",
        description="Few-shot counting by detection with multi-scale dense queries",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--config", default=None)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--force", action="store_true")
    gen.add_argument("--splits", default="train,val,test")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model on a generated dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--config", default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--variant", default=None)
    tr.add_argument("--resume", default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", help="count objects in one image")
    inf.add_argument("--image", required=True)
    inf.add_argument("--boxes", required=True, help="exemplars as x1,y1,x2,y2[;...]")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--out", required=True, help="output directory")
    inf.add_argument("--out-png", default=None)
    inf.add_argument("--out-json", default=None)
    inf.set_defaults(func=cmd_infer)

    ab = sub.add_parser("ablate", help="train and compare ablation variants")
    ab.add_argument("--data", required=True)
    ab.add_argument("--variants", required=True, help="comma-separated variant names")
    ab.add_argument("--out", required=True)
    ab.add_argument("--config", default=None)
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--seeds", default=None, help="comma-separated seeds")
    ab.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
