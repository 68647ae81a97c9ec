"""Command-line entry point wiring the pipeline stages together.

Subcommands: synth, detect, tile, train, cv, eval, inspect, gradcheck, and
the meta-subcommand pipeline (synth -> detect -> tile -> train/cv). Exit
codes: 0 success, 1 validation error, 2 runtime failure. Every run writes a
manifest with the resolved configuration into --out.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import celldetect, dataset, evaluate, imagecore
from .config import OPTIONS, PipelineConfig, resolve, write_manifest
from .errors import SmearScreenError, TrainingDiverged, ValidationError
from .imagecore import LABELS
from .nn import (
    TrainConfig,
    build,
    grad_check,
    load_checkpoint,
    predict,
    preset,
    save_checkpoint,
    train,
)

GRADCHECK_PASS_BAR = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the CLI contract wants 1
    def error(self, message):
        raise _UsageError(message)


def _dtype(cfg: PipelineConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


def _train_config(cfg: PipelineConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        dropout_rate=cfg.dropout,
        batch_size=cfg.batch_size,
        momentum=cfg.momentum,
        seed=seed,
        patience=cfg.patience,
    )


def _detect_hits(plane, cfg: PipelineConfig):
    blurred = imagecore.gaussian_blur(plane, cfg.sigma)
    field = celldetect.sobel_gradients(blurred)
    return celldetect.hough_circles(
        field, cfg.rmin, cfg.rmax, cfg.vote_threshold, cfg.nms
    )


def cmd_synth(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.count):
        smear = dataset.synth_smear(
            cfg.cells, cfg.infected_fraction, cfg.width, cfg.height,
            seed=cfg.seed + i, r_min=cfg.rmin, r_max=cfg.rmax, noise=cfg.noise,
        )
        stem = f"smear_{i:03d}"
        imagecore.save_raster(smear.raster, out / f"{stem}.pgm")
        dataset.write_truth_circles(smear.circles, out / f"{stem}.circles.csv")
        dataset.write_truth_labels(smear.circles, smear.labels, out / f"{stem}.labels.csv")
    write_manifest(cfg, "synth", out)
    print(f"wrote {cfg.count} synthetic smears to {out}")
    return 0


def cmd_detect(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plane = imagecore.to_float(imagecore.load_raster(args.image))
    hits = _detect_hits(plane, cfg)
    celldetect.write_hits_csv(hits, out / "hits.csv")
    print(f"{len(hits)} circles detected in {args.image}")
    if args.tiles_out:
        tiles = celldetect.select_complete_cell_tiles(plane, hits, cfg.tile_size, cfg.margin)
        tile_dir = Path(args.tiles_out)
        tile_dir.mkdir(parents=True, exist_ok=True)
        stem = Path(args.image).stem
        for t in tiles:
            name = imagecore.tile_filename(stem, t)
            imagecore.save_raster(imagecore.to_raster(t.plane, 16), tile_dir / name)
        print(f"{len(tiles)} complete-cell tiles written to {tile_dir}")
    if args.truth:
        truth = celldetect.read_circles_csv(args.truth)
        report = celldetect.detection_metrics(hits, truth, cfg.match_tol)
        print(
            f"tp={report.tp} fp={report.fp} fn={report.fn} "
            f"precision={report.precision:.4f} recall={report.recall:.4f} "
            f"paper_ratio={report.paper_ratio:.4f}"
        )
    write_manifest(cfg, "detect", out)
    return 0


def cmd_tile(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plane = imagecore.to_float(imagecore.load_raster(args.image))
    tiles = imagecore.tile_grid(plane, cfg.tile_size, cfg.stride)
    stem = Path(args.image).stem
    for t in tiles:
        imagecore.save_raster(imagecore.to_raster(t.plane, 16), out / imagecore.tile_filename(stem, t))
    write_manifest(cfg, "tile", out)
    print(f"{len(tiles)} grid tiles written to {out}")
    return 0


def _load_labeled(cfg: PipelineConfig, tiles_dir, labels_csv):
    return dataset.load_annotations(tiles_dir, labels_csv, cfg.tile_size)


def _fit_holdout(cfg: PipelineConfig, tiles, arch: str, out: Path, label: str):
    """Shared holdout-protocol training: returns (net, stats, test metrics)."""
    train_t, val_t, test_t = dataset.stratified_holdout(
        tiles, cfg.val_fraction, cfg.test_fraction, cfg.seed
    )
    stats = dataset.compute_mean(train_t)
    train_n = dataset.normalize(train_t, stats)
    val_n = dataset.normalize(val_t, stats)
    test_n = dataset.normalize(test_t, stats)
    train_n = dataset.balance_by_augmentation(train_n, seed=cfg.seed)
    net = build(preset(arch, cfg.dropout), seed=cfg.seed, dtype=_dtype(cfg))
    history = train(net, train_n, val_n, _train_config(cfg, cfg.seed))
    save_checkpoint(net, stats, out / f"checkpoint_{arch}.smnn")
    evaluate.export_curves(history, out / f"curves_{arch}.csv")
    report = None
    if test_n:
        probs = predict(net, test_n)
        predicted = [LABELS[i] for i in probs.argmax(axis=1)]
        report = evaluate.metrics(evaluate.confusion(predicted, [t.label for t in test_n]))
    print(f"[{label}] {arch}: trained {len(history)} epochs on {len(train_n)} tiles")
    return net, stats, report


def _print_metrics(report: evaluate.MetricsReport, title: str) -> None:
    print(title)
    print("  " + "  ".join(f"{m}={report.value(m):.4f}" for m in evaluate.METRIC_NAMES))
    cm = report.counts
    print(f"  tp={cm.tp} fn={cm.fn} tn={cm.tn} fp={cm.fp}")
    if report.undefined:
        print(f"  undefined (reported as 0): {', '.join(report.undefined)}")


def cmd_train(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tiles = _load_labeled(cfg, args.tiles, args.labels)
    arch = cfg.arch[0]
    _, _, report = _fit_holdout(cfg, tiles, arch, out, "train")
    if report is not None:
        _print_metrics(report, f"held-out test metrics ({arch}):")
        (out / "report.txt").write_text("\n".join(report.to_kv()) + "\n")
    write_manifest(cfg, "train", out)
    return 0


def cmd_cv(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tiles = _load_labeled(cfg, args.tiles, args.labels)
    _run_cv(cfg, tiles, out)
    write_manifest(cfg, "cv", out)
    return 0


def _run_cv(cfg: PipelineConfig, tiles, out: Path) -> None:
    reports = []
    for arch in cfg.arch:
        cv = evaluate.cross_validate(
            tiles, preset(arch, cfg.dropout), _train_config(cfg, cfg.seed),
            cfg.k, cfg.seed, dtype=_dtype(cfg),
        )
        reports.append(cv)
        print(cv.to_text())
        (out / f"cv_report_{arch}.txt").write_text("\n".join(cv.to_kv()) + "\n")
    if len(reports) > 1:
        lines = ["per-fold false-negative rate comparison"]
        header = "fold  " + "  ".join(f"{cv.arch:>12}" for cv in reports)
        lines.append(header)
        for fold in range(cfg.k):
            row = [f"{fold:>4}"]
            for cv in reports:
                fo = cv.folds[fold]
                row.append(f"{fo.report.fnr:12.6f}" if fo.report else "      FAILED")
            lines.append("  ".join(row))
        lines.append("mean  " + "  ".join(f"{cv.mean['fnr']:12.6f}" for cv in reports))
        text = "\n".join(lines) + "\n"
        print(text)
        (out / "comparison.txt").write_text(text)


def cmd_eval(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, stats = load_checkpoint(args.checkpoint)
    tiles = _load_labeled(cfg, args.tiles, args.labels)
    tiles_n = dataset.normalize(tiles, stats)
    probs = predict(net, tiles_n)
    predicted = [LABELS[i] for i in probs.argmax(axis=1)]
    report = evaluate.metrics(evaluate.confusion(predicted, [t.label for t in tiles_n]))
    _print_metrics(report, f"metrics for {args.checkpoint} on {len(tiles)} tiles:")
    (out / "report.txt").write_text("\n".join(report.to_kv()) + "\n")
    write_manifest(cfg, "eval", out)
    return 0


def cmd_inspect(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, stats = load_checkpoint(args.checkpoint)
    raster = imagecore.load_raster(args.tile)
    plane = imagecore.to_float(raster)
    normalized = imagecore.FloatPlane(plane.values - stats.mean)
    tile = imagecore.Tile(raster.width, (0, 0), normalized)
    path = out / f"feature_maps_layer{args.layer}.pgm"
    evaluate.dump_feature_maps(net, tile, args.layer, path)
    print(f"feature maps of layer {args.layer} written to {path}")
    write_manifest(cfg, "inspect", out)
    return 0


def cmd_gradcheck(cfg: PipelineConfig, args) -> int:
    size = cfg.tile_size
    worst = 0.0
    for arch in cfg.arch:
        for s in range(cfg.seeds):
            seed = cfg.seed + s
            rng = np.random.default_rng(seed)
            net = build(preset(arch, cfg.dropout), seed=seed, dtype=np.float64)
            x = rng.normal(0.0, 0.25, size=(2, 1, size, size))
            y = rng.integers(0, 2, size=2)
            result = grad_check(
                net, x, y, epsilon=cfg.epsilon,
                samples_per_tensor=cfg.samples, seed=seed,
            )
            worst = max(worst, result.max_rel_error)
            print(
                f"{arch} seed={seed}: max relative error {result.max_rel_error:.3e} "
                f"over {result.checked} params (worst: {result.worst})"
            )
    ok = worst < GRADCHECK_PASS_BAR
    print(f"overall max relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def _label_selected_tiles(cfg, plane, hits, truth_circles, truth_labels, stem):
    """Cut complete-cell tiles and label each by its matching truth circle."""
    tiles = celldetect.select_complete_cell_tiles(plane, hits, cfg.tile_size, cfg.margin)
    hit_for_tile = {}
    for hit in hits:
        cx, cy = round(hit.cx), round(hit.cy)
        half = cfg.tile_size // 2
        hit_for_tile[(cx - half, cy - half)] = hit
    labeled = []
    for t in tiles:
        hit = hit_for_tile.get(t.origin)
        if hit is None:
            continue
        best, best_d = None, float("inf")
        for circle, lab in zip(truth_circles, truth_labels):
            d = math.hypot(hit.cx - circle.cx, hit.cy - circle.cy)
            if d <= cfg.match_tol and abs(hit.r - circle.r) <= cfg.match_tol and d < best_d:
                best, best_d = lab, d
        if best is None:
            continue
        name = imagecore.tile_filename(stem, t)
        labeled.append(
            dataset.LabeledTile(
                tile_id=name,
                tile=imagecore.Tile(t.size, t.origin, t.plane, best),
                label=best,
            )
        )
    return labeled


def cmd_pipeline(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    all_tiles = []
    pooled_pred, pooled_truth = [], []
    for i in range(cfg.count):
        smear = dataset.synth_smear(
            cfg.cells, cfg.infected_fraction, cfg.width, cfg.height,
            seed=cfg.seed + i, r_min=cfg.rmin, r_max=cfg.rmax, noise=cfg.noise,
        )
        stem = f"smear_{i:03d}"
        imagecore.save_raster(smear.raster, images_dir / f"{stem}.pgm")
        dataset.write_truth_circles(smear.circles, images_dir / f"{stem}.circles.csv")
        dataset.write_truth_labels(smear.circles, smear.labels, images_dir / f"{stem}.labels.csv")
        plane = imagecore.to_float(smear.raster)
        hits = _detect_hits(plane, cfg)
        pooled_pred.extend(hits)
        pooled_truth.extend(smear.circles)
        all_tiles.extend(
            _label_selected_tiles(cfg, plane, hits, smear.circles, smear.labels, stem)
        )
    det = celldetect.detection_metrics(pooled_pred, pooled_truth, cfg.match_tol)
    print(
        f"detection over {cfg.count} images: tp={det.tp} fp={det.fp} fn={det.fn} "
        f"precision={det.precision:.4f} recall={det.recall:.4f} paper_ratio={det.paper_ratio:.4f}"
    )
    tiles_csv = dataset.save_labeled_tiles(all_tiles, out / "tiles")
    n_inf = sum(1 for t in all_tiles if t.label == "infected")
    print(f"{len(all_tiles)} labeled tiles ({n_inf} infected) -> {tiles_csv}")

    if cfg.protocol == "cv":
        _run_cv(cfg, all_tiles, out)
    else:
        arch_reports = []
        for arch in cfg.arch:
            _, _, report = _fit_holdout(cfg, all_tiles, arch, out, "pipeline")
            if report is None:
                raise ValidationError("holdout protocol needs test_fraction > 0")
            _print_metrics(report, f"held-out test metrics ({arch}):")
            arch_reports.append((arch, report))
        lines = []
        for arch, report in arch_reports:
            lines.extend(report.to_kv(prefix=f"{arch}."))
        (out / "report.txt").write_text("\n".join(lines) + "\n")
        if len(arch_reports) > 1:
            cmp_lines = ["architecture  fnr       accuracy"]
            for arch, report in arch_reports:
                cmp_lines.append(f"{arch:<12}  {report.fnr:.6f}  {report.accuracy:.6f}")
            (out / "comparison.txt").write_text("\n".join(cmp_lines) + "\n")
    write_manifest(cfg, "pipeline", out)
    return 0


def _add_common(sub: argparse.ArgumentParser, *names: str) -> None:
    sub.add_argument("--config", help="config file (key = value under [section] headers)")
    sub.add_argument("--out", required=True, help="output directory for all artifacts")
    by_name = {opt.name: opt for opt in OPTIONS}
    seen = set()
    for name in names:
        if name in seen:
            continue
        seen.add(name)
        opt = by_name[name]
        flag = "--" + name.replace("_", "-")
        if name == "arch":
            sub.add_argument(flag, action="append", dest="arch", help=opt.help)
        else:
            sub.add_argument(flag, type=opt.parse, dest=name, help=opt.help)


_DETECT_OPTS = ("sigma", "rmin", "rmax", "vote_threshold", "nms", "margin", "match_tol")
_SYNTH_OPTS = ("count", "cells", "infected_fraction", "width", "height", "noise", "rmin", "rmax", "seed")
_TRAIN_OPTS = (
    "arch", "epochs", "learning_rate", "dropout", "batch_size", "momentum",
    "patience", "dtype", "tile_size", "val_fraction", "test_fraction", "seed",
)


def build_parser() -> _Parser:
    parser = _Parser(prog="smearscreen", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate synthetic smears with ground truth")
    _add_common(p, *_SYNTH_OPTS)

    p = subs.add_parser("detect", help="detect complete cells in one image")
    p.add_argument("image", help="input PGM/PNG")
    p.add_argument("--truth", help="ground-truth circles CSV to score against")
    p.add_argument("--tiles-out", help="directory for complete-cell tiles")
    _add_common(p, *_DETECT_OPTS, "tile_size", "seed")

    p = subs.add_parser("tile", help="split an image into a regular tile grid")
    p.add_argument("image")
    _add_common(p, "tile_size", "stride", "seed")

    p = subs.add_parser("train", help="train on labeled tiles (holdout protocol)")
    p.add_argument("--tiles", required=True, help="tile directory")
    p.add_argument("--labels", required=True, help="labels CSV (tile_file,label)")
    _add_common(p, *_TRAIN_OPTS)

    p = subs.add_parser("cv", help="stratified k-fold cross-validation")
    p.add_argument("--tiles", required=True)
    p.add_argument("--labels", required=True)
    _add_common(p, *_TRAIN_OPTS, "k")

    p = subs.add_parser("eval", help="score a checkpoint on labeled tiles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--labels", required=True)
    _add_common(p, "tile_size", "seed")

    p = subs.add_parser("inspect", help="dump feature maps of a conv layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tile", required=True, help="a single tile image")
    p.add_argument("--layer", type=int, required=True, help="conv layer index")
    _add_common(p, "seed")

    p = subs.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p, "arch", "seeds", "samples", "epsilon", "tile_size", "dropout", "seed")

    p = subs.add_parser("pipeline", help="synth -> detect -> tile -> train/cv")
    _add_common(p, *_SYNTH_OPTS, *_TRAIN_OPTS, *_DETECT_OPTS, "protocol", "k")

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = resolve(vars(args), getattr(args, "config", None))
        handler = {
            "synth": cmd_synth,
            "detect": cmd_detect,
            "tile": cmd_tile,
            "train": cmd_train,
            "cv": cmd_cv,
            "eval": cmd_eval,
            "inspect": cmd_inspect,
            "gradcheck": cmd_gradcheck,
            "pipeline": cmd_pipeline,
        }[args.command]
        return handler(cfg, args)
    except (ValidationError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SmearScreenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if not isinstance(exc, TrainingDiverged) else 2
    except Exception as exc:  # unexpected runtime failure
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
