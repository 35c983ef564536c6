"""Command-line entry point: ``fvslide <command> ...``.

Exit codes: 0 ok, 2 I/O, 3 configuration, 4 runtime numeric.
"""

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__, evaluation, pipeline
from .classifier import TrainedModel, atomic_write_text
from .config import THREADS_ENV, PipelineConfig, resolve_threads
from .errors import ConfigError, FvSlideError, SingleClassDataset
from .fisher import GmmCodebook
from .preprocess import format_patch_csv
from .slide_io import open_slide
from .synth import SynthConfig, generate_dataset

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS_EPILOG = """\
defaults (override with --config):
  selection   patch 512x512 at level 0, stride 512, n_patches 8, mode cellularity,
              min tissue fraction 0.5, blur threshold 50, brightness [40, 235]
  descriptor  builtin extractor K=64, projected to D=10, instance-normalized per slide
  codebook    M=5 Gaussians, equal weights 0.2, sigma 0.1, k-means means, fixed
  classifier  MLP 100 -> 64 -> 32 -> C with ReLU, softmax cross-entropy
  training    AdamW lr 1e-5, weight decay 1e-5, batch size 1, 500 epochs
  seed 0, threads 1 (--threads, else $%s, else config)
""" % THREADS_ENV


def _common(parser):
    parser.add_argument("--config", help="PipelineConfig JSON file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int, help=f"worker threads (fallback ${THREADS_ENV})")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _common(common)
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="fvslide", description="Fisher-vector whole-slide classification.",
                                     epilog=DEFAULTS_EPILOG, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"fvslide {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], epilog=DEFAULTS_EPILOG, formatter_class=fmt,
                       help="tissue mask, patch grid, quality filter, nucleus counts, selection")
    p.add_argument("manifests", nargs="+", help="slide manifest.json file(s)")
    p.add_argument("--out", required=True, help="output directory; writes <slide_id>/patches.csv")
    p.add_argument("--figures", action="store_true", help="also render an overview PNG per slide")

    p = sub.add_parser("fit-codebook", parents=[common], epilog=DEFAULTS_EPILOG, formatter_class=fmt,
                       help="k-means codebook over projected, normalized training descriptors")
    p.add_argument("dataset", help="dataset JSON: [{manifest_path, label, center_id}]")
    p.add_argument("--out", required=True, help="codebook JSON path")

    p = sub.add_parser("train", parents=[common], epilog=DEFAULTS_EPILOG, formatter_class=fmt,
                       help="train projection + classifier, write a checkpoint and loss CSV")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.add_argument("--loss-csv", help="default: <out stem>_loss.csv")
    p.add_argument("--codebook", help="use this codebook instead of fitting one")
    p.add_argument("--figures", action="store_true", help="also render the loss curve")

    p = sub.add_parser("predict", parents=[common], help="classify slides with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", help="CSV path (default: standard output)")

    p = sub.add_parser("evaluate", parents=[common], epilog=DEFAULTS_EPILOG, formatter_class=fmt,
                       help="metrics JSON + ROC CSV for a checkpoint, or cross-validation / ablation")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", help="required unless --cv or --ablation is given")
    p.add_argument("--cv", choices=["centers"], help="leave-one-center-out cross-validation")
    p.add_argument("--ablation", choices=["selection"], help="cellularity vs random selection")
    p.add_argument("--mandatory-centers", help="comma-separated centers that always stay in training")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--roc", help="ROC CSV path (default: <out stem>_roc.csv)")
    p.add_argument("--figures", action="store_true", help="also render ROC / ablation PNGs")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic slide dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=30, help="slides per class (default 30)")
    p.add_argument("--classes", type=int, default=2, help="number of classes (default 2)")
    p.add_argument("--centers", default="C0,C1,C2,C3,C4", help="comma-separated center ids")
    p.add_argument("--signal", choices=["density", "texture"], default="density")
    p.add_argument("--size", type=int, help="slide width and height in px")
    p.add_argument("--synth-config", help="JSON object of SynthConfig overrides")
    return parser


def load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.reseed(args.seed)
    return cfg, resolve_threads(args.threads, cfg.threads)


def _stem(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def _write_json(path, doc):
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_preprocess(args, cfg, threads):
    slides = [open_slide(m) for m in args.manifests]
    for slide in slides:
        result = pipeline.preprocess(slide, cfg, threads)
        out_dir = os.path.join(args.out, slide.slide_id)
        atomic_write_text(os.path.join(out_dir, "patches.csv"), format_patch_csv(result.records))
        if args.figures:
            from .plotting import plot_preprocess
            plot_preprocess(result, os.path.join(out_dir, "overview.png"), title=slide.slide_id)
        print(f"{slide.slide_id}: {len(result.records)} patches, {len(result.selected)} selected", file=sys.stderr)
    return EXIT_OK


def _training_data(args, cfg, threads):
    entries = pipeline.load_dataset(args.dataset)
    class_names = pipeline.class_table(entries)
    features = pipeline.FeatureSource(cfg, threads)
    raws = features.all(entries)
    labels = np.array([class_names.index(e.label) for e in entries])
    return entries, class_names, raws, labels


def cmd_fit_codebook(args, cfg, threads):
    from .classifier import initialize_model
    _, class_names, raws, labels = _training_data(args, cfg, threads)
    cb = cfg.codebook
    model = initialize_model(list(zip(raws, labels)), class_names, cfg.train, out_dim=cfg.descriptor.D,
                             n_centers=cb.M, sigma=cb.sigma, weights=cb.weights,
                             trainable_means=cb.trainable_means, kmeans_iterations=cb.kmeans_iterations)
    _write_json(args.out, model.codebook.to_dict())
    return EXIT_OK


def cmd_train(args, cfg, threads):
    _, class_names, raws, labels = _training_data(args, cfg, threads)
    if len(set(labels.tolist())) < 2:
        raise SingleClassDataset(f"training needs at least 2 classes, found {class_names}")
    codebook = GmmCodebook.load(args.codebook) if args.codebook else None
    result = pipeline.fit(raws, labels, class_names, cfg, codebook=codebook)
    result.model.save(args.out)
    loss_path = args.loss_csv or _stem(args.out, "_loss.csv")
    lines = ["epoch,mean_loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(result.loss_trace)]
    atomic_write_text(loss_path, "\n".join(lines) + "\n")
    if args.figures:
        from .plotting import plot_loss
        plot_loss(result.loss_trace, _stem(loss_path, ".png"))
    print(f"final mean loss {result.loss_trace[-1]:.6f} after {len(result.loss_trace)} epochs", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args, cfg, threads):
    model = TrainedModel.load(args.checkpoint)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["slide_id", "class", "class_name"] + [f"p_{c}" for c in model.class_names])
    for path in args.manifests:
        slide = open_slide(path)
        out = pipeline.predict_slide(model, path, threads, cfg=cfg if args.config else None)
        writer.writerow([slide.slide_id, out["class"], out["class_name"]] + [repr(float(p)) for p in out["probabilities"]])
    if args.out:
        atomic_write_text(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _cv_document(result):
    doc = result["pooled"].to_dict()
    doc["cv"] = "centers"
    doc["folds"] = [f.to_dict() for f in result["folds"]]
    mean = result["mean"].to_dict()
    mean.pop("folds", None)
    doc["mean"] = mean
    return doc


def _write_roc(path, labels, probs, positive, figure, title):
    if len(set(int(v) for v in labels)) < 2:
        return
    points = evaluation.roc_curve(np.asarray(probs)[:, positive], labels, positive)
    evaluation.write_roc_csv(path, points)
    if figure:
        from .plotting import plot_roc
        plot_roc(points, _stem(path, ".png"), evaluation.roc_auc(np.asarray(probs)[:, positive], labels, positive),
                 title=title)


def cmd_evaluate(args, cfg, threads):
    entries = pipeline.load_dataset(args.dataset)
    mandatory = [c for c in (args.mandatory_centers or "").split(",") if c] or None
    roc_path = args.roc or _stem(args.out, "_roc.csv")
    if args.ablation:
        runs = pipeline.ablation_selection_mode(entries, cfg, threads, mandatory)
        doc = {"ablation": "selection", "modes": list(runs)}
        for mode, result in runs.items():
            doc[mode] = _cv_document(result)
            _write_roc(_stem(roc_path, f"_{mode}.csv"), result["labels"], result["probabilities"],
                       result["positive"], args.figures, f"ROC ({mode} selection)")
        _write_json(args.out, doc)
        if args.figures:
            from .plotting import plot_ablation
            plot_ablation({m: r["pooled"] for m, r in runs.items()}, _stem(args.out, "_ablation.png"))
        for mode, result in runs.items():
            print(f"{mode}: accuracy {result['pooled'].accuracy:.4f}", file=sys.stderr)
        return EXIT_OK
    if args.cv:
        result = pipeline.cross_validate(entries, cfg, pipeline.FeatureSource(cfg, threads), mandatory, threads)
        _write_json(args.out, _cv_document(result))
        _write_roc(roc_path, result["labels"], result["probabilities"], result["positive"], args.figures,
                   "ROC (pooled out-of-fold)")
        print(f"{len(result['folds'])} folds, pooled accuracy {result['pooled'].accuracy:.4f}", file=sys.stderr)
        return EXIT_OK
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint unless --cv or --ablation is given")
    model = TrainedModel.load(args.checkpoint)
    run_cfg = cfg if args.config else (PipelineConfig.from_dict(model.config) if model.config else cfg)
    if args.seed is not None:
        run_cfg.reseed(args.seed)
    report, _, probs, labels = pipeline.evaluate_model(model, entries, pipeline.FeatureSource(run_cfg, threads))
    _write_json(args.out, report.to_dict())
    pos = pipeline.positive_index(model.class_names, run_cfg.eval.positive_class)
    _write_roc(roc_path, labels, probs, pos, args.figures, "ROC")
    print(f"accuracy {report.accuracy:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args, cfg, threads):
    overrides = {}
    if args.synth_config:
        try:
            overrides = json.loads(args.synth_config)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--synth-config: {exc}") from None
        if not isinstance(overrides, dict):
            raise ConfigError("--synth-config must be a JSON object")
    overrides.setdefault("seed", cfg.seed)
    overrides["signal"] = args.signal
    if args.size:
        overrides["width"] = overrides["height"] = args.size
    try:
        base = SynthConfig(**overrides)
    except TypeError as exc:
        raise ConfigError(f"--synth-config: {exc}") from None
    centers = [c for c in args.centers.split(",") if c]
    if args.per_class < 1 or not centers or args.classes < 2:
        raise ConfigError("need --per-class >= 1, --classes >= 2 and at least one center")
    path = generate_dataset(args.per_class, base, centers, args.out, n_classes=args.classes, threads=threads)
    print(path)
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "fit-codebook": cmd_fit_codebook,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, threads = load_config(args)
        return COMMANDS[args.command](args, cfg, threads)
    except FvSlideError as exc:
        print(f"fvslide {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"fvslide {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"fvslide {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ValueError) as exc:
        print(f"fvslide {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
