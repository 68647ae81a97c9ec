"""Classification scoring, cross-validation orchestration, and exports.

The positive class is Infected throughout: the clinically expensive mistake
is a missed infection, so the false-negative rate is the headline number.
Undefined ratios (zero denominators) are reported as 0 and flagged so
degenerate folds stay visible without crashing batch runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import (
    FoldSplit,
    LabeledTile,
    balance_by_augmentation,
    compute_mean,
    normalize,
    resolve_fold,
    stratified_kfold,
)
from .errors import SmearScreenError, ValidationError
from .imagecore import LABEL_INFECTED, LABELS, FloatPlane, Raster, Tile, save_raster, to_raster
from .nn.arch import ArchitectureSpec
from .nn.layers import Conv2d
from .nn.network import Network, build
from .nn.training import EpochStats, TrainConfig, predict, train

METRIC_NAMES = ("sensitivity", "specificity", "accuracy", "precision", "f_score", "fnr")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float
    specificity: float
    accuracy: float
    precision: float
    f_score: float
    fnr: float
    counts: ConfusionMatrix
    undefined: tuple[str, ...] = ()

    def value(self, name: str) -> float:
        return getattr(self, name)

    def to_kv(self, prefix: str = "") -> list[str]:
        lines = [f"{prefix}{name}={self.value(name):.9f}" for name in METRIC_NAMES]
        cm = self.counts
        lines += [
            f"{prefix}tp={cm.tp}",
            f"{prefix}fn={cm.fn}",
            f"{prefix}tn={cm.tn}",
            f"{prefix}fp={cm.fp}",
        ]
        if self.undefined:
            lines.append(f"{prefix}undefined={','.join(self.undefined)}")
        return lines


def confusion(predicted: Sequence[str], truth: Sequence[str], positive: str = LABEL_INFECTED) -> ConfusionMatrix:
    """Count the four outcomes with Infected as the positive class."""
    if len(predicted) != len(truth):
        raise ValidationError(
            f"prediction/truth length mismatch: {len(predicted)} vs {len(truth)}"
        )
    tp = fn = tn = fp = 0
    for p, t in zip(predicted, truth):
        if t == positive:
            if p == positive:
                tp += 1
            else:
                fn += 1
        else:
            if p == positive:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp, fn, tn, fp)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Derive the full metric set from a confusion matrix."""
    if cm.total == 0:
        raise ValidationError("cannot score an all-zero confusion matrix")
    undefined = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    sensitivity = ratio(cm.tp, cm.tp + cm.fn, "sensitivity")
    specificity = ratio(cm.tn, cm.tn + cm.fp, "specificity")
    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    accuracy = (cm.tp + cm.tn) / cm.total
    if "sensitivity" in undefined:
        undefined.append("fnr")
        fnr = 0.0
    else:
        fnr = 1.0 - sensitivity
    if precision + sensitivity > 0 and "precision" not in undefined and "sensitivity" not in undefined:
        f_score = 2.0 * precision * sensitivity / (precision + sensitivity)
    else:
        undefined.append("f_score")
        f_score = 0.0
    return MetricsReport(
        sensitivity, specificity, accuracy, precision, f_score, fnr, cm, tuple(undefined)
    )


@dataclass(frozen=True)
class FoldOutcome:
    fold_index: int
    report: Optional[MetricsReport]
    history: tuple[EpochStats, ...] = ()
    error: Optional[str] = None


@dataclass(frozen=True)
class CvReport:
    arch: str
    k: int
    seed: int
    config: TrainConfig
    folds: tuple[FoldOutcome, ...]
    mean: dict[str, float]
    std: dict[str, float]

    def to_text(self) -> str:
        lines = [
            f"cross-validation: arch={self.arch} k={self.k} seed={self.seed}",
            f"config: epochs={self.config.epochs} lr={self.config.learning_rate} "
            f"dropout={self.config.dropout_rate} batch={self.config.batch_size} "
            f"momentum={self.config.momentum} patience={self.config.patience}",
            "",
            "fold  " + "  ".join(f"{m:>11}" for m in METRIC_NAMES),
        ]
        for fo in self.folds:
            if fo.report is None:
                lines.append(f"{fo.fold_index:>4}  FAILED: {fo.error}")
            else:
                vals = "  ".join(f"{fo.report.value(m):11.6f}" for m in METRIC_NAMES)
                lines.append(f"{fo.fold_index:>4}  {vals}")
        lines.append("mean  " + "  ".join(f"{self.mean[m]:11.6f}" for m in METRIC_NAMES))
        lines.append(" std  " + "  ".join(f"{self.std[m]:11.6f}" for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"

    def to_kv(self) -> list[str]:
        lines = [
            f"arch={self.arch}",
            f"k={self.k}",
            f"seed={self.seed}",
        ]
        for fo in self.folds:
            prefix = f"fold{fo.fold_index}."
            if fo.report is None:
                lines.append(f"{prefix}error={fo.error}")
            else:
                lines.extend(fo.report.to_kv(prefix))
        for m in METRIC_NAMES:
            lines.append(f"mean.{m}={self.mean[m]:.9f}")
        for m in METRIC_NAMES:
            lines.append(f"std.{m}={self.std[m]:.9f}")
        return lines


def _aggregate(folds: Sequence[FoldOutcome]) -> tuple[dict[str, float], dict[str, float]]:
    scored = [fo.report for fo in folds if fo.report is not None]
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    for m in METRIC_NAMES:
        vals = np.array([r.value(m) for r in scored], dtype=np.float64)
        mean[m] = float(vals.mean()) if len(vals) else 0.0
        std[m] = float(vals.std()) if len(vals) else 0.0
    return mean, std


def _carve_validation(
    train_tiles: list[LabeledTile], seed: int, fraction: float = 0.1
) -> tuple[list[LabeledTile], list[LabeledTile]]:
    """Split a small stratified validation slice off the training tiles.

    Keeps the test fold untouched by early stopping and curve reporting."""
    rng = np.random.default_rng(seed)
    val: list[LabeledTile] = []
    tr: list[LabeledTile] = []
    for lab in LABELS:
        group = [t for t in train_tiles if t.label == lab]
        perm = [group[i] for i in rng.permutation(len(group))]
        n_val = max(1, round(len(perm) * fraction))
        val.extend(perm[:n_val])
        tr.extend(perm[n_val:])
    return tr, val


def run_fold(
    tiles: Sequence[LabeledTile],
    split: FoldSplit,
    spec: ArchitectureSpec,
    config: TrainConfig,
    dtype=np.float64,
) -> FoldOutcome:
    """Train on one fold's training side and score its untouched test fold.

    The normalization mean comes from the fold's training tiles only, and
    augmentation balancing happens after the split, on the training side
    only, so nothing about the test fold leaks into training.
    """
    train_side, _ = resolve_fold(tiles, split)
    test_ids = set(split.test_ids)
    test_side = [t for t in tiles if t.variant == 0 and t.tile_id in test_ids]
    stats = compute_mean(train_side)
    train_norm = normalize(train_side, stats)
    test_norm = normalize(test_side, stats)
    fold_seed = config.seed + 7919 * (split.fold_index + 1)
    train_norm = balance_by_augmentation(train_norm, seed=fold_seed)
    tr, val = _carve_validation(train_norm, seed=fold_seed)
    net = build(spec, seed=fold_seed, dtype=dtype)
    try:
        history = train(net, tr, val, TrainConfig(
            epochs=config.epochs,
            learning_rate=config.learning_rate,
            dropout_rate=config.dropout_rate,
            batch_size=config.batch_size,
            momentum=config.momentum,
            seed=fold_seed,
            patience=config.patience,
        ))
    except SmearScreenError as exc:
        return FoldOutcome(split.fold_index, None, (), str(exc))
    probs = predict(net, test_norm)
    predicted = [LABELS[i] for i in probs.argmax(axis=1)]
    truth = [t.label for t in test_norm]
    report = metrics(confusion(predicted, truth))
    return FoldOutcome(split.fold_index, report, tuple(history))


def cross_validate(
    tiles: Sequence[LabeledTile],
    spec: ArchitectureSpec,
    config: TrainConfig,
    k: int,
    seed: int,
    dtype=np.float64,
) -> CvReport:
    """Stratified k-fold evaluation with per-fold retraining from scratch.

    A failing fold is recorded with its error and excluded from the
    aggregates; the remaining folds still run.
    """
    splits = stratified_kfold(tiles, k, seed)
    folds = [run_fold(tiles, split, spec, config, dtype) for split in splits]
    mean, std = _aggregate(folds)
    return CvReport(spec.name, k, seed, config, tuple(folds), mean, std)


def export_curves(stats: Sequence[EpochStats], path) -> None:
    """Write the per-epoch training curve CSV (9-decimal fixed precision)."""
    if not stats:
        raise ValidationError("no epoch stats to export")
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc,seconds"]
    for s in stats:
        lines.append(
            f"{s.epoch},{s.train_loss:.9f},{s.train_accuracy:.9f},"
            f"{s.val_loss:.9f},{s.val_accuracy:.9f},{s.wall_time:.9f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_curves(path) -> list[EpochStats]:
    lines = Path(path).read_text().strip().splitlines()
    out = []
    for line in lines[1:]:
        epoch, tl, ta, vl, va, sec = line.split(",")
        out.append(EpochStats(int(epoch), float(tl), float(ta), float(vl), float(va), float(sec)))
    return out


def dump_feature_maps(net: Network, tile: Tile, layer_index: int, path) -> Raster:
    """Render one conv layer's channels as a near-square 8-bit image grid.

    Channels are min-max normalized independently; constant channels render
    black. Cells are separated by 1-px white lines; channel order follows
    the parameter order. Returns the raster that was written.
    """
    if not 0 <= layer_index < len(net.layers):
        raise ValidationError(f"layer index {layer_index} out of range")
    if not isinstance(net.layers[layer_index], Conv2d):
        raise ValidationError(
            f"layer {layer_index} is {net.layers[layer_index]!r}, not a conv layer"
        )
    x = tile.plane.values[None, None, :, :].astype(net.dtype)
    h = x
    for layer in net.layers[: layer_index + 1]:
        h = layer.forward(h, False)
    maps = h[0]  # (channels, h, w)
    c, mh, mw = maps.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    canvas = np.full(
        (rows * mh + rows - 1, cols * mw + cols - 1), 255, dtype=np.uint8
    )
    for ch in range(rows * cols):
        ry, rx = divmod(ch, cols)
        y0, x0 = ry * (mh + 1), rx * (mw + 1)
        if ch >= c:
            cell = np.zeros((mh, mw), dtype=np.uint8)
        else:
            m = maps[ch]
            lo, hi = float(m.min()), float(m.max())
            if hi > lo:
                cell = np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
            else:
                cell = np.zeros((mh, mw), dtype=np.uint8)
        canvas[y0 : y0 + mh, x0 : x0 + mw] = cell
    raster = Raster(canvas.shape[1], canvas.shape[0], 8, canvas)
    save_raster(raster, path)
    return raster
