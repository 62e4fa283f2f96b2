"""Command-line entry point.

Subcommands: prepare-data, train, evaluate, explain, complexity, report.
Exit codes: 0 on success, 1 on a runtime failure (reported as a single
``error: ...`` line on stderr), 2 on a usage error (argparse).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .architecture import build_model, forward, load_checkpoint, resolve_spec
from .augmentation import AugmentConfig
from .complexity import complexity_report, render_json, render_table
from .explain import identify_critical_factors, render_overlay, write_mask
from .manifest import (
    Finding,
    Label,
    SourceSchema,
    SplitName,
    TestSplitSpec,
    demographic_summary,
    distribution_report,
    ingest_source,
    read_manifest,
    render_demographics,
    render_distribution,
    split_patient_level,
    unify,
    write_manifest,
)
from .metrics import (
    confusion,
    metrics_from_confusion,
    parse_report_json,
    read_predictions,
    render_report,
    render_report_json,
    write_predictions,
)
from .preprocessing import load_image, preprocess, preprocess_files
from .training import (
    ConstraintSpec,
    TrainConfig,
    check_constraints,
    render_verdict,
    train,
)

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrscreen",
        description="Chest X-ray screening pipeline: data preparation, training, evaluation, explanation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="ingest source CSVs into a unified, split manifest")
    p.add_argument("--sources", required=True, type=Path, help="directory of per-source CSV files")
    p.add_argument("--out", required=True, type=Path, help="output manifest CSV path")
    p.add_argument("--test-pos-images", required=True, type=int)
    p.add_argument("--test-neg-images", required=True, type=int)
    p.add_argument("--test-neg-none", type=int, default=None,
                   help="of the negative test images, how many from no-finding cases")
    p.add_argument("--test-neg-pneumonia", type=int, default=None,
                   help="of the negative test images, how many from non-target pneumonia cases")
    p.add_argument("--val-fraction", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a screening model from a split manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--data-root", type=Path, default=None, help="base directory for image paths (default: manifest directory)")
    p.add_argument("--spec", default="cxr2-tiny", help="built-in spec name or YAML spec file")
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-rebalance", action="store_true")
    p.add_argument("--out", required=True, type=Path, help="run directory for artifacts")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a split (or a prediction log) and gate on constraints")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--data-root", type=Path, default=None)
    p.add_argument("--split", choices=[s.value for s in SplitName], default="test")
    p.add_argument("--predictions", type=Path, default=None,
                   help="score an existing image_id,label,probability log instead of running a model")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out", type=Path, default=None, help="directory for metrics.json and predictions.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="greedy occlusion search for a single image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--cells", type=int, default=12)
    p.add_argument("--drop-threshold", type=float, default=0.5)
    p.add_argument("--fill", type=float, default=None, help="occlusion fill value (default: image mean)")
    p.add_argument("--out-dir", required=True, type=Path)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("complexity", help="parameter and MAC accounting for a spec")
    p.add_argument("--spec", default="cxr2-tiny")
    p.add_argument("--input", default=None, metavar="HxW", help="evaluate at this input size, e.g. 480x480")
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("report", help="summarize a run directory's artifacts")
    p.add_argument("--run-dir", required=True, type=Path)
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _require_new(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} already exists; pass --overwrite to replace it")


# ---------------------------------------------------------------------------
# prepare-data


def cmd_prepare_data(args: argparse.Namespace) -> int:
    if not args.sources.is_dir():
        raise FileNotFoundError(f"--sources directory not found: {args.sources}")
    _require_new(args.out, args.overwrite)

    csv_files = sorted(p for p in args.sources.glob("*.csv") if not p.name.endswith(".rejections.csv"))
    if not csv_files:
        raise FileNotFoundError(f"no source CSV files in {args.sources}")

    results = []
    for csv_path in csv_files:
        schema_path = csv_path.with_suffix(".schema.json")
        schema = None
        if schema_path.exists():
            schema = SourceSchema.from_dict(json.loads(schema_path.read_text()))
        results.append(ingest_source(csv_path, csv_path.stem, schema))

    manifest = unify([res.records for res in results])
    negative_split = None
    if args.test_neg_none is not None or args.test_neg_pneumonia is not None:
        if args.test_neg_none is None or args.test_neg_pneumonia is None:
            raise ValueError("--test-neg-none and --test-neg-pneumonia must be given together")
        negative_split = {
            Finding.NONE: args.test_neg_none,
            Finding.PNEUMONIA_NON_SARS2: args.test_neg_pneumonia,
        }
    test_spec = TestSplitSpec(
        positive_images=args.test_pos_images,
        negative_images=args.test_neg_images,
        negative_finding_split=negative_split,
    )
    manifest = split_patient_level(manifest, test_spec, args.val_fraction, args.seed)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, args.out)

    rejections = [r for res in results for r in res.rejections]
    if rejections:
        rej_path = args.out.with_name(args.out.stem + ".rejections.csv")
        with rej_path.open("w") as fh:
            fh.write("source,row,reason\n")
            for r in rejections:
                reason = r.reason.replace('"', "'")
                fh.write(f'{r.source},{r.row_number},"{reason}"\n')
        print(f"rejected {len(rejections)} rows; details in {rej_path}")

    snapshot = {
        "command": "prepare-data",
        "sources": [p.name for p in csv_files],
        "test_pos_images": args.test_pos_images,
        "test_neg_images": args.test_neg_images,
        "val_fraction": args.val_fraction,
        "seed": args.seed,
        "images": len(manifest),
        "rejected_rows": len(rejections),
    }
    args.out.with_name(args.out.stem + ".config.json").write_text(json.dumps(snapshot, indent=2) + "\n")

    print(render_distribution(distribution_report(manifest)))
    print()
    print(render_demographics(demographic_summary(manifest)))
    print(f"\nmanifest written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest, require_splits=True)
    data_root = args.data_root if args.data_root is not None else args.manifest.parent
    spec = resolve_spec(args.spec)

    run_dir = args.out
    if run_dir.exists() and any(run_dir.iterdir()) and not args.overwrite:
        raise FileExistsError(f"{run_dir} is not empty; pass --overwrite to reuse it")
    run_dir.mkdir(parents=True, exist_ok=True)

    lock = run_dir / "run.lock"
    if lock.exists():
        raise RuntimeError(f"{lock} exists: another run is active (or crashed; delete the lock to retry)")
    lock.write_text(f"pid={os.getpid()}\n")
    try:
        cfg = TrainConfig(
            learning_rate=args.lr,
            batch_size=args.batch_size,
            epochs=args.epochs,
            patience=args.patience,
            seed=args.seed,
            rebalance=not args.no_rebalance,
            augment=None if args.no_augment else AugmentConfig(seed=args.seed),
            max_steps=args.max_steps,
        )
        model = build_model(spec, seed=args.seed)
        extra = {"manifest": str(args.manifest), "data_root": str(data_root)}
        model, history = train(model, manifest, cfg, data_root, run_dir, extra_config=extra)

        report = complexity_report(spec)
        (run_dir / "complexity.json").write_text(render_json(report) + "\n")
    finally:
        lock.unlink(missing_ok=True)

    best = history.epochs[history.best_epoch - 1]
    print(f"trained {len(history.epochs)} epochs (early stop: {'yes' if history.stopped_early else 'no'})")
    print(f"best epoch {best.epoch}: val_accuracy={best.val_accuracy:.4f}")
    print(f"artifacts in {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _predictions_from_model(args: argparse.Namespace) -> list[tuple[str, int, float]]:
    if args.manifest is None:
        raise ValueError("--manifest is required when evaluating a checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest, require_splits=True)
    data_root = args.data_root if args.data_root is not None else args.manifest.parent
    records = manifest.records_for_split(SplitName(args.split))
    if not records:
        raise ValueError(f"manifest has no images in the {args.split} split")
    side = model.spec.input_shape[1]
    rows: list[tuple[str, int, float]] = []
    batch = 32
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        stack = preprocess_files([Path(data_root) / r.file_path for r in chunk], side=side)
        probs = forward(model, stack)
        for record, prob in zip(chunk, probs):
            rows.append((record.image_id, 1 if record.label is Label.POSITIVE else 0, float(prob)))
    return rows


def cmd_evaluate(args: argparse.Namespace) -> int:
    if (args.predictions is None) == (args.checkpoint is None):
        raise ValueError("pass exactly one of --checkpoint or --predictions")
    if args.predictions is not None:
        rows = read_predictions(args.predictions)
    else:
        rows = _predictions_from_model(args)

    probs = np.array([p for _, _, p in rows])
    labels = np.array([y for _, y, _ in rows])
    matrix = confusion(probs, labels, args.threshold)
    report = metrics_from_confusion(matrix, args.threshold)
    verdict = check_constraints(report, ConstraintSpec())

    if args.format == "json":
        payload = {
            "metrics": json.loads(render_report_json(report)),
            "constraints": {
                "passed": verdict.passed,
                "checks": [
                    {
                        "name": c.name,
                        "minimum": float(c.minimum),
                        "value": None if c.value is None else float(c.value),
                        "passed": c.passed,
                    }
                    for c in verdict.checks
                ],
            },
        }
        print(json.dumps(payload, indent=2))
    else:
        print(render_report(report))
        print(render_verdict(verdict))

    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.json").write_text(render_report_json(report) + "\n")
        write_predictions(args.out / "predictions.csv", rows)
    return 0


# ---------------------------------------------------------------------------
# explain


def cmd_explain(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    side = model.spec.input_shape[1]
    img = preprocess(load_image(args.image), side=side)
    mask = identify_critical_factors(
        model,
        img,
        cells_per_side=args.cells,
        drop_threshold=args.drop_threshold,
        fill=args.fill,
    )
    args.out_dir.mkdir(parents=True, exist_ok=True)
    render_overlay(img, mask, args.out_dir / "overlay.png")
    write_mask(mask, args.out_dir / "mask.csv")
    summary = {
        "image": str(args.image),
        "cells_per_side": mask.cells_per_side,
        "baseline_score": mask.baseline_score,
        "masked_score": mask.masked_score,
        "decision_flipped": mask.decision_flipped,
        "critical_cells": [[int(r), int(c)] for r, c in mask.selection_order],
    }
    (args.out_dir / "explain.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(
        f"baseline {mask.baseline_score:.4f} -> masked {mask.masked_score:.4f} "
        f"({len(mask.selection_order)} cells, flipped: {'yes' if mask.decision_flipped else 'no'})"
    )
    print(f"overlay and mask written to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# complexity


def cmd_complexity(args: argparse.Namespace) -> int:
    spec = resolve_spec(args.spec)
    input_hw = None
    if args.input is not None:
        match = re.fullmatch(r"(\d+)x(\d+)", args.input)
        if not match:
            raise ValueError(f"--input must look like 480x480, got {args.input!r}")
        input_hw = (int(match.group(1)), int(match.group(2)))
    report = complexity_report(spec, input_hw)
    text = render_table(report) if args.format == "table" else render_json(report)
    if args.out is not None:
        args.out.write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = args.run_dir
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")

    sections: dict[str, object] = {}
    gaps: list[str] = []
    warnings: list[str] = []

    if (run_dir / "run.lock").exists():
        warnings.append("run.lock present: run still active, or it crashed mid-run")

    config_path = run_dir / "config.json"
    if config_path.exists():
        sections["config"] = json.loads(config_path.read_text())
    else:
        gaps.append("config.json missing")

    history_path = run_dir / "history.jsonl"
    if history_path.exists():
        checksum_path = run_dir / "history.sha256"
        if checksum_path.exists():
            recorded = checksum_path.read_text().split()[0]
            actual = hashlib.sha256(history_path.read_bytes()).hexdigest()
            if recorded != actual:
                warnings.append("history checksum mismatch: history.jsonl changed after the run")
        else:
            gaps.append("history.sha256 missing")
        epochs = [json.loads(line) for line in history_path.read_text().splitlines() if line.strip()]
        if epochs:
            best = max(epochs, key=lambda e: (e["val_accuracy"], -e["epoch"]))
            sections["history"] = {
                "epochs": len(epochs),
                "best_epoch": best["epoch"],
                "best_val_accuracy": best["val_accuracy"],
                "final_train_loss": epochs[-1]["train_loss"],
            }
        else:
            gaps.append("history.jsonl is empty")
    else:
        gaps.append("history.jsonl missing")

    for name in ("best", "last"):
        if not (run_dir / "checkpoints" / f"{name}.pt").exists():
            gaps.append(f"checkpoints/{name}.pt missing")

    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        report = parse_report_json(metrics_path.read_text())
        verdict = check_constraints(report, ConstraintSpec())
        sections["metrics"] = json.loads(render_report_json(report))
        sections["constraints"] = {
            "passed": verdict.passed,
            "detail": render_verdict(verdict).splitlines(),
        }
    else:
        gaps.append("metrics.json missing (run `cxrscreen evaluate --out` into this directory)")

    complexity_path = run_dir / "complexity.json"
    if complexity_path.exists():
        payload = json.loads(complexity_path.read_text())
        sections["complexity"] = {
            "spec": payload.get("spec"),
            "total_params": payload.get("total_params"),
            "total_macs": payload.get("total_macs"),
        }
    else:
        gaps.append("complexity.json missing")

    if args.format == "json":
        print(json.dumps({"run_dir": str(run_dir), "sections": sections, "gaps": gaps, "warnings": warnings}, indent=2))
        return 0

    print(f"run report: {run_dir}")
    for title, body in sections.items():
        print(f"\n[{title}]")
        if isinstance(body, dict):
            for key, value in body.items():
                print(f"  {key}: {value}")
        else:
            print(f"  {body}")
    if warnings:
        print("\nwarnings:")
        for w in warnings:
            print(f"  ! {w}")
    if gaps:
        print("\ngaps:")
        for g in gaps:
            print(f"  - {g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
