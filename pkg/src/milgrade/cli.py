"""Command-line entry point: ``milgrade <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from milgrade import SLIDE_CLASSES
from milgrade.baseline import load_probe, majority_vote, probe_predict_bag, save_probe, train_probe
from milgrade.cv import cross_validate, labeled_patch_set
from milgrade.errors import DataError, MilgradeError, NumericError, UsageError
from milgrade.heatmap import HeatmapSpec, render_attention_map, resolve_class
from milgrade.io import encode_coords, load_bags, read_manifest, read_patch_labels, write_bags
from milgrade.metrics import cohen_kappa, confusion, report_csv, summary_table, weighted_f1
from milgrade.model import MilConfig, load_params, predict, save_params
from milgrade.raster import extract_labeled_patches, extract_tissue_patches, read_pgm, read_ppm, write_pgm
from milgrade.synth import SyntheticSpec, synth_generate
from milgrade.training import TrainConfig, logs_csv, train_mil, train_val_split


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _pair(kind):
    def parse(text):
        try:
            lo, hi = (kind(t) for t in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        return lo, hi

    return parse


def _add_mil_args(p):
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--proj-dim", type=int, default=512)
    p.add_argument("--attn-dim", type=int, default=256)
    p.add_argument("--activation", choices=("rectified", "linear"), default="rectified")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milgrade", description="Gated-attention MIL for predominant growth-pattern grading.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="grid patch extraction from a PPM image (+ optional PGM label mask)")
    p.add_argument("--image", required=True)
    p.add_argument("--mask")
    p.add_argument("--patch-size", type=int, default=448)
    p.add_argument("--tissue-min", type=float, default=0.10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic cohort")
    p.add_argument("--slides", type=int, default=100)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--patches", type=_pair(int), default=(50, 200), metavar="MIN,MAX")
    p.add_argument("--fraction", type=_pair(float), default=(0.5, 0.8), metavar="MIN,MAX")
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--class-weights", type=lambda s: [float(x) for x in s.split(",")])
    p.add_argument("--confuser", action="store_true", help="remainder patches from one shared confuser component")
    p.add_argument("--confuser-alignment", type=float, default=0.75)
    p.add_argument("--slides-per-patient", type=int, default=1)

    p = sub.add_parser("train-probe", help="train the patch-level linear probe")
    p.add_argument("--data", required=True)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub.add_parser("train-mil", help="train the gated-attention MIL head")
    p.add_argument("--bags", required=True)
    _add_mil_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub.add_parser("cv", help="patient-stratified k-fold cross-validation")
    p.add_argument("--bags", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--method", choices=("abmil", "vote"), default="abmil")
    _add_mil_args(p)
    p.add_argument("--report", required=True)
    p.add_argument("--plan")

    p = sub.add_parser("eval", help="score a MIL checkpoint on a bag directory")
    p.add_argument("--bags", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("vote-eval", help="score the probe + majority vote on a bag directory")
    p.add_argument("--bags", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("heatmap", help="render a grid attention map for one slide")
    p.add_argument("--bags", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="target_class", default="predicted")
    p.add_argument("--cell", type=int, default=8)
    p.add_argument("--percentiles", type=_pair(float), default=(1.0, 99.0), metavar="LO,HI")
    p.add_argument("--out", required=True)
    return parser


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_extract(args) -> None:
    image = read_ppm(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mask:
        mask = read_pgm(args.mask)
        samples = extract_labeled_patches(image, mask, args.patch_size, args.tissue_min)
        rows = [[s.coord[0], s.coord[1], s.label, repr(s.tissue_fraction)] for s in samples]
        header = ["x", "y", "label", "tissue_fraction"]
        coords = [s.coord for s in samples]
    else:
        coords = extract_tissue_patches(image, args.patch_size, args.tissue_min)
        rows = [[x, y] for x, y in coords]
        header = ["x", "y"]
    with open(out / "patches.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    if coords:
        (out / "patches.fcoo").write_bytes(encode_coords(coords))
    print(f"extract: {len(coords)} patches of {args.patch_size}px kept")


def cmd_synth(args) -> None:
    spec = SyntheticSpec(
        n_slides=args.slides,
        dim=args.dim,
        patches_per_slide=args.patches,
        predominant_fraction=args.fraction,
        class_separation=args.separation,
        noise_sigma=args.sigma,
        class_weights=args.class_weights,
        seed=args.seed,
        confuser=args.confuser,
        confuser_alignment=args.confuser_alignment,
        slides_per_patient=args.slides_per_patient,
    )
    bags, patches, labels = synth_generate(spec)
    write_bags(bags, args.out, labels)
    print(f"synth: {len(bags)} slides, {len(patches.labels)} labeled patches -> {args.out}")


def _labeled_patches(ids, by_id, labels):
    X, y = labeled_patch_set(ids, by_id, labels)
    if len(y) == 0:
        raise DataError("no per-patch labels (.flbl files) found for this split")
    return X, y


def cmd_train_probe(args) -> None:
    records = read_manifest(args.data)
    by_id = {b.slide_id: b for b in load_bags(args.data)}
    labels = {r.slide_id: read_patch_labels(r, args.data) for r in records}
    train_ids, val_ids = train_val_split(records, args.val_fraction, args.seed)
    cfg = TrainConfig(args.lr, args.batch, args.max_epochs, args.patience, args.seed, args.val_fraction)
    print(f"train-probe: lr={cfg.learning_rate!r} batch={cfg.batch_size} patience={cfg.patience} seed={cfg.seed}")
    probe, logs = train_probe(_labeled_patches(train_ids, by_id, labels), _labeled_patches(val_ids, by_id, labels), cfg)
    save_probe(probe, args.out)
    if args.log:
        _write(args.log, logs_csv(logs))
    best = logs[logs[-1].best_epoch]
    print(f"train-probe: best epoch {best.epoch}, val loss {best.val_loss:.6f}")


def _mil_setup(args, dim):
    config = MilConfig(dim, args.proj_dim, args.attn_dim, 5, args.activation)
    tcfg = TrainConfig(args.lr, 1, args.max_epochs, args.patience, args.seed, args.val_fraction)
    return config, tcfg


def cmd_train_mil(args) -> None:
    bags = load_bags(args.bags)
    by_id = {b.slide_id: b for b in bags}
    config, tcfg = _mil_setup(args, bags[0].embeddings.shape[1])
    print(
        f"train-mil: lr={tcfg.learning_rate!r} batch={tcfg.batch_size} patience={tcfg.patience} "
        f"max_epochs={tcfg.max_epochs} seed={tcfg.seed}"
    )
    train_ids, val_ids = train_val_split(bags, tcfg.val_fraction, tcfg.seed)
    params, logs = train_mil([by_id[s] for s in train_ids], [by_id[s] for s in val_ids], config, tcfg)
    save_params(params, args.out)
    if args.log:
        _write(args.log, logs_csv(logs))
    best = logs[logs[-1].best_epoch]
    print(f"train-mil: best epoch {best.epoch}, val loss {best.val_loss:.6f}")


def cmd_cv(args) -> None:
    records = read_manifest(args.bags)
    bags = load_bags(args.bags)
    config, tcfg = _mil_setup(args, bags[0].embeddings.shape[1])
    labels = [read_patch_labels(r, args.bags) for r in records] if args.method == "vote" else None
    print(f"cv: method={args.method} k={args.k} lr={tcfg.learning_rate!r} batch={tcfg.batch_size} seed={tcfg.seed}")
    result = cross_validate(bags, args.k, config, tcfg, method=args.method, patch_labels=labels)
    _write(args.report, report_csv(result.folds, 5))
    if args.plan:
        _write(args.plan, result.plan.to_json())
    sys.stdout.write(summary_table(result.folds, SLIDE_CLASSES, title=f"{args.method} ({args.k}-fold, held-out test folds)"))


def _slide_report(rows, header, path, y_true, y_pred) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    if y_true:
        cm = confusion(y_true, y_pred, 5)
        print(f"weighted F1 {weighted_f1(cm):.3f}  kappa {cohen_kappa(cm):.3f}  (n={len(y_true)})")


def cmd_eval(args) -> None:
    params = load_params(args.model)
    rows, y_true, y_pred = [], [], []
    for bag in load_bags(args.bags):
        cls, logits, _ = predict(params, bag)
        if not np.all(np.isfinite(logits)):
            raise NumericError(f"non-finite logits for slide {bag.slide_id}")
        rows.append([bag.slide_id, "" if bag.label is None else bag.label, cls, *[repr(float(x)) for x in logits]])
        if bag.label is not None:
            y_true.append(bag.label)
            y_pred.append(cls)
    _slide_report(rows, ["slide_id", "label", "pred", *[f"logit{c}" for c in range(5)]], args.report, y_true, y_pred)


def cmd_vote_eval(args) -> None:
    probe = load_probe(args.probe)
    rows, y_true, y_pred = [], [], []
    for bag in load_bags(args.bags):
        preds = probe_predict_bag(probe, bag.embeddings, bag.coords)
        cls = majority_vote(preds)
        votes = np.bincount([p.pred for p in preds], minlength=6)
        rows.append([bag.slide_id, "" if bag.label is None else bag.label, cls, *votes.tolist()])
        if bag.label is not None:
            y_true.append(bag.label)
            y_pred.append(cls)
    header = ["slide_id", "label", "pred", "votes_background", *[f"votes_{n}" for n in SLIDE_CLASSES]]
    _slide_report(rows, header, args.report, y_true, y_pred)


def cmd_heatmap(args) -> None:
    params = load_params(args.model)
    bags = {b.slide_id: b for b in load_bags(args.bags)}
    if args.slide not in bags:
        raise UsageError(f"slide {args.slide!r} not in {args.bags}")
    target = resolve_class(args.target_class, params.config.n_classes)
    spec = HeatmapSpec(target, args.cell, args.percentiles)
    raster, table, cls = render_attention_map(params, bags[args.slide], spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / f"{args.slide}_attention.pgm", raster)
    _write(out / f"{args.slide}_attention.csv", table)
    print(f"heatmap: {args.slide} class {SLIDE_CLASSES[cls]} -> {raster.shape[1]}x{raster.shape[0]} px")


COMMANDS = {
    "extract": cmd_extract,
    "synth": cmd_synth,
    "train-probe": cmd_train_probe,
    "train-mil": cmd_train_mil,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "vote-eval": cmd_vote_eval,
    "heatmap": cmd_heatmap,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except MilgradeError as e:
        print(f"milgrade: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"milgrade: error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, OverflowError) as e:
        print(f"milgrade: numeric failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
