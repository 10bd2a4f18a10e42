"""Command-line interface: ``heatmil {synth,train,eval,heatmap,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or format
error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_assignments, load_config
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    LayoutError,
    NumericalError,
    UndefinedMetricError,
)
from .evaluation import EvalOptions, EvalReport, evaluate_dataset
from .formats import atomic_write, load_split, read_bag, read_manifest, write_dataset
from .imaging import export_heatmap
from .model import forward_bag
from .pipeline import bind_to_data, fit, run_ablation
from .synthetic import generate_synthetic, preset
from .training import grid_search

log = logging.getLogger("heatmil")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    """Bad argument value detected after parsing."""


# ---------------------------------------------------------------- helpers


def _resolve(args) -> RunConfig:
    """Defaults, then the config file, then ``--preset``, ``--set`` and the dedicated flags."""
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "preset", None):
        cfg = replace(cfg, synth=preset(args.preset, seed=cfg.synth.seed))
    cfg = apply_assignments(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), synth=replace(cfg.synth, seed=args.seed))
    if getattr(args, "max_epochs", None) is not None:
        if args.max_epochs < 1:
            raise UsageError("--max-epochs must be >= 1")
        cfg = replace(cfg, train=replace(cfg.train, max_epochs=args.max_epochs,
                                         patience=min(cfg.train.patience, args.max_epochs)))
    if getattr(args, "lr", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, learning_rate=args.lr))
    return cfg


def _dataset(root) -> tuple[dict, dict]:
    manifest = read_manifest(root)
    splits = {name: load_split(root, name, manifest) for name in manifest["splits"]}
    for name in ("train", "val"):
        if not splits.get(name):
            raise FormatError(f"dataset has no {name!r} split")
    return manifest, splits


def _csv_text(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty; pass --force to overwrite")
        for sub in ("bags", "masks"):
            shutil.rmtree(out / sub, ignore_errors=True)
    ds = generate_synthetic(cfg.synth)
    write_dataset(out, ds.splits, synth_config=cfg.synth.to_dict())
    cfg.write(out)
    sizes = {k: len(v) for k, v in ds.splits.items()}
    log.info("wrote %s bags to %s", sizes, out)
    print(json.dumps(sizes, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _, splits = _dataset(args.data)
    cfg = bind_to_data(cfg, splits["train"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.grid:
        from .plotting import plot_grid

        res = grid_search(cfg.grid, cfg.model, cfg.train, cfg.loss, splits["train"], splits["val"],
                          budget=args.grid_budget, jobs=args.jobs)
        _write_json(out / "grid_leaderboard.json", res.leaderboard)
        cols = ["rank", "alpha", "learning_rate", "lambda_sd", "metric", "metric_name", "best_epoch"]
        atomic_write(out / "grid_leaderboard.csv", _csv_text(res.leaderboard, cols).encode())
        plot_grid(res.leaderboard, out / "grid.png")
        b = res.best
        cfg = replace(cfg, model=replace(cfg.model, alpha=b["alpha"]),
                      train=replace(cfg.train, learning_rate=b["learning_rate"]),
                      loss=replace(cfg.loss, lambda_sd=b["lambda_sd"]))
        log.info("grid best: alpha=%g lr=%g lambda=%g (%s=%.4f)", b["alpha"], b["learning_rate"],
                 b["lambda_sd"], b["metric_name"], b["metric"])
    cfg.write(out)
    result = fit(cfg, splits["train"], splits["val"], log_path=out / "history.jsonl")
    save_checkpoint(out / "checkpoint.insm", result.params)
    summary = {"best_epoch": result.best_epoch, "best_metric": result.best_metric,
               "metric_name": result.metric_name, "epochs_run": len(result.history) - 1}
    _write_json(out / "summary.json", summary)
    from .plotting import plot_training_curve

    plot_training_curve(result.history, out / "training_curve.png", result.metric_name)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _binarization(text: str):
    if text == "otsu":
        return "otsu"
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--binarize must be 'otsu' or a number, got {text!r}") from None


def cmd_eval(args) -> int:
    from .plotting import plot_strata

    params = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    bags = load_split(args.data, args.split, manifest)
    if bags[0].embed_dim != params.config.embed_dim or bags[0].num_labels != params.config.num_labels:
        raise FormatError("dataset does not match the checkpoint's input width or label count")
    comparator = EvalReport.read(args.comparator) if args.comparator else None
    opts = EvalOptions(binarization=_binarization(args.binarize), saliency=args.saliency,
                       permutation_iterations=args.iterations, seed=args.seed)
    report = evaluate_dataset(params, bags, opts, comparator, jobs=args.jobs)
    out = Path(args.out)
    report.write(out / "report.json")
    report.write_csv(out / "report.csv")
    _write_json(out / "resolved_eval.json", {
        "checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
        "comparator": str(args.comparator) if args.comparator else None,
        "binarization": opts.binarization, "saliency": opts.saliency,
        "permutation_iterations": opts.permutation_iterations, "seed": opts.seed,
        "model": params.config.to_dict(),
    })
    if report.data["dice"] is not None:
        plot_strata(report.data, out / "strata.png")
    headline = {"auc": report.data["auc"], "dice": report.mean_dice}
    if report.data["permutation"]:
        headline["p_overall"] = report.data["permutation"]["overall"]
    print(json.dumps(headline, sort_keys=True))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    params = load_checkpoint(args.checkpoint)
    if args.data:
        manifest = read_manifest(args.data)
        row = next((r for rows in manifest["splits"].values() for r in rows if r["bag_id"] == args.bag), None)
        if row is None:
            raise UsageError(f"bag {args.bag!r} not found in {args.data}")
        bag = read_bag(Path(args.data) / row["path"])
    else:
        bag = read_bag(args.bag)
    if not 0 <= args.label < params.config.num_labels:
        raise UsageError(f"label {args.label} out of range [0, {params.config.num_labels})")
    if args.upsample < 1:
        raise UsageError("--upsample must be >= 1")
    pred = forward_bag(bag, params)
    full = pred.masked_heatmap if args.masked else pred.full_heatmap
    img = export_heatmap(full, args.label, args.upsample, args.out)
    if args.png:
        from .plotting import plot_heatmap

        plot_heatmap(img, Path(args.out).with_suffix(".png"), f"{bag.bag_id} label {args.label}")
    print(json.dumps({"bag_id": bag.bag_id, "label": args.label, "shape": list(img.shape),
                      "y_hat": float(pred.y_hat[args.label]), "threshold": float(pred.thresholds[args.label].threshold)}))
    return EXIT_OK


def _ablation_markdown(rows: list[dict]) -> str:
    mark = {True: "x", False: ""}
    lines = ["| configuration | CS | SM | Rg | AUC | Dice |", "|:--|:--:|:--:|:--:|----:|-----:|"]
    for r in rows:
        a = "n/a" if r["auc"] is None else f"{r['auc']:.4f}"
        d = "n/a" if r["dice"] is None else f"{r['dice']:.4f}"
        lines.append(f"| {r['row']} | {mark[r['context']]} | {mark[r['smoothmax']]} | {mark[r['regularizer']]} | {a} | {d} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    cfg = _resolve(args)
    _, splits = _dataset(args.data)
    test = splits.get(args.split)
    if not test:
        raise FormatError(f"dataset has no {args.split!r} split")
    cfg = bind_to_data(cfg, splits["train"])
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    rows = run_ablation(cfg, splits["train"], splits["val"], test, seeds=seeds, jobs=args.jobs)
    _write_json(out / "ablation.json", rows)
    atomic_write(out / "ablation.md", _ablation_markdown(rows).encode())
    atomic_write(out / "ablation.csv",
                 _csv_text(rows, ["row", "context", "smoothmax", "regularizer", "auc", "dice"]).encode())
    plot_ablation(rows, out / "ablation.png")
    print(_ablation_markdown(rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatmil", description="Weakly supervised heatmap MIL on patch embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="JSON run config; flags take precedence")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable), e.g. loss.lambda_sd=0.05")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--preset", choices=["single_label", "multi_label", "full_width"])
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model, writing the best checkpoint and history")
    with_config(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--grid", action="store_true", help="grid-search alpha, learning rate and lambda first")
    sp.add_argument("--grid-budget", type=int, help="epoch cap per grid point")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on one split")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--comparator", type=Path, help="report to test against (one-tailed, ours > theirs)")
    sp.add_argument("--saliency", choices=["builtin", "gradcam"], default="builtin")
    sp.add_argument("--binarize", default="otsu", help="'otsu' or a fixed threshold")
    sp.add_argument("--iterations", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("heatmap", help="export one heatmap channel as PGM")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--bag", required=True, help="IEB1 file, or a bag id when --data is given")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--label", type=int, default=0)
    sp.add_argument("--upsample", type=int, default=1)
    sp.add_argument("--masked", action="store_true", help="export the Otsu-masked map")
    sp.add_argument("--png", action="store_true", help="also write a colour preview next to the PGM")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_heatmap)

    sp = sub.add_parser("ablate", help="train and score the four component-ablation rows")
    with_config(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--seeds", default="0", help="comma-separated training seeds")
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"heatmil {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, LayoutError, DimensionError, UndefinedMetricError, FileNotFoundError) as exc:
        print(f"heatmil {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"heatmil {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
