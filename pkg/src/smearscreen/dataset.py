"""Labeled-tile management and the synthetic smear generator.

Covers annotation I/O, the 8-way dihedral augmentation family, minority-class
balancing, dataset-mean normalization, stratified splitting (k-fold and
holdout), and a fully seeded generator of fake smear images with ground
truth, which makes the end-to-end pipeline testable without clinical data.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .celldetect import CircleHit
from .errors import ValidationError
from .imagecore import (
    DEFAULT_TILE_SIZE,
    LABELS,
    FloatPlane,
    Raster,
    Tile,
    load_raster,
    save_raster,
    to_float,
    to_raster,
)

log = logging.getLogger(__name__)

N_DIHEDRAL = 8


@dataclass(frozen=True)
class LabeledTile:
    """A tile with its class label and augmentation provenance."""

    tile_id: str
    tile: Tile
    label: str
    augmented_from: Optional[str] = None
    variant: int = 0  # dihedral element, 0 = identity

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"unknown label {self.label!r}")
        if not 0 <= self.variant < N_DIHEDRAL:
            raise ValidationError(f"variant {self.variant} outside 0..7")
        if (self.variant == 0) != (self.augmented_from is None):
            raise ValidationError(
                "augmented tiles need a non-identity variant and a source id"
            )


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class NormalizationStats:
    mean: float

    def __post_init__(self):
        if not math.isfinite(self.mean):
            raise ValidationError("normalization mean must be finite")


def dihedral_apply(values: np.ndarray, variant: int) -> np.ndarray:
    """Apply dihedral element `variant`: 0..3 rotate CCW by 90*variant,
    4..7 flip horizontally first and then rotate."""
    if values.shape[0] != values.shape[1]:
        raise ValidationError("dihedral transforms need a square plane")
    if not 0 <= variant < N_DIHEDRAL:
        raise ValidationError(f"variant {variant} outside 0..7")
    base = np.fliplr(values) if variant >= 4 else values
    return np.rot90(base, k=variant % 4).copy()


def dihedral_variants(t: LabeledTile) -> list[LabeledTile]:
    """All 8 dihedral images of a tile; element 0 is the tile itself."""
    out = [t]
    for v in range(1, N_DIHEDRAL):
        plane = FloatPlane(dihedral_apply(t.tile.plane.values, v))
        out.append(
            LabeledTile(
                tile_id=f"{t.tile_id}#v{v}",
                tile=Tile(t.tile.size, t.tile.origin, plane, t.tile.label),
                label=t.label,
                augmented_from=t.tile_id,
                variant=v,
            )
        )
    return out


def balance_by_augmentation(tiles: Sequence[LabeledTile], seed: int) -> list[LabeledTile]:
    """Grow the minority class with dihedral variants until classes match.

    Variants are assigned round-robin over the minority tiles in a seeded
    random order, never repeating a (source, variant) pair and never
    touching the originals. With more than an 8x imbalance the variants run
    out; the residual imbalance is logged and the result returned as-is.
    """
    by_label = {lab: [t for t in tiles if t.label == lab] for lab in LABELS}
    if any(not group for group in by_label.values()):
        raise ValidationError("both classes must be present to balance")
    counts = {lab: len(group) for lab, group in by_label.items()}
    minority = min(LABELS, key=lambda lab: counts[lab])
    majority = max(LABELS, key=lambda lab: counts[lab])
    need = counts[majority] - counts[minority]
    if need == 0:
        return list(tiles)

    rng = np.random.default_rng(seed)
    existing: dict[str, set[int]] = {}
    for t in tiles:
        src = t.augmented_from if t.augmented_from is not None else t.tile_id
        existing.setdefault(src, set()).add(t.variant)

    sources = [t for t in by_label[minority] if t.variant == 0]
    order = rng.permutation(len(sources))
    queues = []
    for idx in order:
        src = sources[idx]
        avail = [v for v in rng.permutation(np.arange(1, N_DIHEDRAL)) if v not in existing[src.tile_id]]
        queues.append((src, list(avail)))

    out = list(tiles)
    while need > 0:
        progressed = False
        for src, avail in queues:
            if need == 0:
                break
            if not avail:
                continue
            v = int(avail.pop(0))
            plane = FloatPlane(dihedral_apply(src.tile.plane.values, v))
            out.append(
                LabeledTile(
                    tile_id=f"{src.tile_id}#v{v}",
                    tile=Tile(src.tile.size, src.tile.origin, plane, src.tile.label),
                    label=src.label,
                    augmented_from=src.tile_id,
                    variant=v,
                )
            )
            need -= 1
            progressed = True
        if not progressed:
            log.warning(
                "augmentation variants exhausted; residual imbalance of %d tiles", need
            )
            break
    return out


def compute_mean(tiles: Sequence[LabeledTile]) -> NormalizationStats:
    """Scalar mean over every pixel of the supplied (training) tiles."""
    if not tiles:
        raise ValidationError("cannot compute a mean over zero tiles")
    total = 0.0
    count = 0
    for t in tiles:
        total += float(t.tile.plane.values.sum())
        count += t.tile.plane.values.size
    return NormalizationStats(total / count)


def normalize(tiles: Sequence[LabeledTile], stats: NormalizationStats) -> list[LabeledTile]:
    """Subtract the dataset mean from every pixel of every tile."""
    out = []
    for t in tiles:
        plane = FloatPlane(t.tile.plane.values - stats.mean)
        out.append(replace(t, tile=Tile(t.tile.size, t.tile.origin, plane, t.tile.label)))
    return out


def stratified_kfold(tiles: Sequence[LabeledTile], k: int, seed: int) -> list[FoldSplit]:
    """Deterministic stratified k-fold over the variant-0 tiles.

    Test folds are pairwise disjoint and cover every original tile exactly
    once; per-class proportions in each test fold stay within rounding of
    the global proportions. Augmented variants never enter a split; they
    follow their source (see resolve_fold).
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    originals = [t for t in tiles if t.variant == 0]
    by_class = {lab: [t.tile_id for t in originals if t.label == lab] for lab in LABELS}
    for lab, ids in by_class.items():
        if len(ids) < k:
            raise ValidationError(f"class {lab!r} has {len(ids)} tiles, fewer than k={k}")
    rng = np.random.default_rng(seed)
    chunks_per_class = {}
    for lab in LABELS:
        ids = by_class[lab]
        perm = [ids[i] for i in rng.permutation(len(ids))]
        chunks_per_class[lab] = [list(c) for c in np.array_split(np.array(perm, dtype=object), k)]
    all_ids = [t.tile_id for t in originals]
    splits = []
    for fold in range(k):
        test = set()
        for lab in LABELS:
            test.update(chunks_per_class[lab][fold])
        splits.append(
            FoldSplit(
                fold_index=fold,
                train_ids=tuple(i for i in all_ids if i not in test),
                test_ids=tuple(i for i in all_ids if i in test),
            )
        )
    return splits


def stratified_holdout(
    tiles: Sequence[LabeledTile],
    val_fraction: float,
    test_fraction: float,
    seed: int,
) -> tuple[list[LabeledTile], list[LabeledTile], list[LabeledTile]]:
    """Deterministic per-class train/val/test split of the variant-0 tiles."""
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ValidationError("holdout fractions must be nonnegative and sum below 1")
    originals = [t for t in tiles if t.variant == 0]
    rng = np.random.default_rng(seed)
    train: list[LabeledTile] = []
    val: list[LabeledTile] = []
    test: list[LabeledTile] = []
    for lab in LABELS:
        group = [t for t in originals if t.label == lab]
        perm = [group[i] for i in rng.permutation(len(group))]
        n_test = round(len(perm) * test_fraction)
        n_val = round(len(perm) * val_fraction)
        test.extend(perm[:n_test])
        val.extend(perm[n_test : n_test + n_val])
        train.extend(perm[n_test + n_val :])
    return train, val, test


def resolve_fold(
    tiles: Sequence[LabeledTile], split: FoldSplit
) -> tuple[list[LabeledTile], list[LabeledTile]]:
    """Partition tiles by a fold split; augmented tiles follow their source."""
    train_set = set(split.train_ids)
    test_set = set(split.test_ids)
    train, test = [], []
    for t in tiles:
        src = t.augmented_from if t.augmented_from is not None else t.tile_id
        if src in train_set:
            train.append(t)
        elif src in test_set:
            test.append(t)
    return train, test


# --- synthetic smear generation -------------------------------------------

_BACKGROUND = 0.78
_CELL_DEPTH = (0.16, 0.26)  # how far below background a cell body sits
_CELL_EDGE_WIDTH = 2.5
_INCLUSION_VALUE = 0.04
_INCLUSION_RADIUS = (2.5, 4.5)
_INCLUSION_EDGE_WIDTH = 1.0


@dataclass(frozen=True)
class SynthSmear:
    raster: Raster
    circles: tuple[CircleHit, ...]
    labels: tuple[str, ...]


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _render_disk(img: np.ndarray, cx: float, cy: float, r: float, value: float, edge: float) -> None:
    """Blend a soft-edged disk of the given value into the image."""
    h, w = img.shape
    reach = int(math.ceil(r + edge)) + 1
    x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
    y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    alpha = _smoothstep((r + edge / 2.0 - d) / edge)
    patch = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = patch * (1.0 - alpha) + value * alpha


def synth_smear(
    n_cells: int,
    infected_fraction: float,
    width: int,
    height: int,
    seed: int,
    r_min: float = 12.0,
    r_max: float = 30.0,
    noise: float = 0.01,
    min_gap: float = 4.0,
    border: float = 6.0,
) -> SynthSmear:
    """Generate a 16-bit fake smear with ground-truth circles and labels.

    Cells are darkish soft-edged disks on a bright background; infected
    cells contain 1-3 small, very dark inclusions. Placement is rejection
    sampled so cells never overlap and always lie fully inside the image.
    Everything is a deterministic function of the seed.
    """
    if n_cells < 0:
        raise ValidationError("n_cells must be nonnegative")
    if not 0.0 <= infected_fraction <= 1.0:
        raise ValidationError("infected_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    img = np.full((height, width), _BACKGROUND, dtype=np.float64)

    placed: list[tuple[float, float, float]] = []
    budget = 2000 + 400 * n_cells
    while len(placed) < n_cells and budget > 0:
        budget -= 1
        r = float(rng.uniform(r_min, r_max))
        lo = r + border
        if width - r - border <= lo or height - r - border <= lo:
            continue
        cx = float(rng.uniform(lo, width - r - border))
        cy = float(rng.uniform(lo, height - r - border))
        if all(
            math.hypot(cx - px, cy - py) >= r + pr + min_gap for px, py, pr in placed
        ):
            placed.append((cx, cy, r))
    if len(placed) < n_cells:
        raise ValidationError(
            f"could only place {len(placed)} of {n_cells} cells; density infeasible"
        )

    n_infected = round(n_cells * infected_fraction)
    labels = np.array(["infected"] * n_infected + ["healthy"] * (n_cells - n_infected))
    labels = labels[rng.permutation(n_cells)] if n_cells else labels

    for (cx, cy, r), label in zip(placed, labels):
        depth = float(rng.uniform(*_CELL_DEPTH))
        _render_disk(img, cx, cy, r, _BACKGROUND - depth, _CELL_EDGE_WIDTH)
        if label == "infected":
            for _ in range(int(rng.integers(1, 4))):
                ir = min(float(rng.uniform(*_INCLUSION_RADIUS)), 0.35 * r)
                ang = float(rng.uniform(0.0, 2.0 * math.pi))
                dist = float(rng.uniform(0.0, max(0.0, 0.5 * r - ir - 1.0)))
                _render_disk(
                    img,
                    cx + dist * math.cos(ang),
                    cy + dist * math.sin(ang),
                    ir,
                    _INCLUSION_VALUE,
                    _INCLUSION_EDGE_WIDTH,
                )

    img += rng.normal(0.0, noise, size=img.shape)
    raster = to_raster(FloatPlane(img), depth=16)
    circles = tuple(CircleHit(cx, cy, r) for cx, cy, r in placed)
    return SynthSmear(raster, circles, tuple(labels))


def write_truth_circles(circles: Sequence[CircleHit], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cx", "cy", "r"])
        for c in circles:
            writer.writerow([f"{c.cx:.3f}", f"{c.cy:.3f}", f"{c.r:.3f}"])


def write_truth_labels(circles: Sequence[CircleHit], labels: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cx", "cy", "r", "label"])
        for c, lab in zip(circles, labels):
            writer.writerow([f"{c.cx:.3f}", f"{c.cy:.3f}", f"{c.r:.3f}", lab])


def read_truth_labels(path) -> tuple[list[CircleHit], list[str]]:
    circles, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cx", "cy", "r", "label"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected header cx,cy,r,label")
        for row in reader:
            circles.append(CircleHit(float(row["cx"]), float(row["cy"]), float(row["r"])))
            lab = row["label"].strip().lower()
            if lab not in LABELS:
                raise ValidationError(f"{path}: unknown label {row['label']!r}")
            labels.append(lab)
    return circles, labels


# --- annotation and tile-file I/O ------------------------------------------

_ORIGIN_RE = re.compile(r"_x(\d+)_y(\d+)\.[a-z]+$")


def load_annotations(
    tile_dir, labels_csv, tile_size: int = DEFAULT_TILE_SIZE
) -> list[LabeledTile]:
    """Read a `tile_file,label` CSV and load each referenced tile image."""
    tile_dir = Path(tile_dir)
    out = []
    with open(labels_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"tile_file", "label"} <= set(reader.fieldnames):
            raise ValidationError(f"{labels_csv}: expected header tile_file,label")
        for i, row in enumerate(reader, start=2):
            name = row["tile_file"].strip()
            label = row["label"].strip().lower()
            if label not in LABELS:
                raise ValidationError(f"{labels_csv} line {i}: unknown label {row['label']!r}")
            path = tile_dir / name
            if not path.is_file():
                raise ValidationError(f"{labels_csv} line {i}: missing tile file {path}")
            raster = load_raster(path)
            if raster.width != tile_size or raster.height != tile_size:
                raise ValidationError(
                    f"{labels_csv} line {i}: tile {name} is "
                    f"{raster.width}x{raster.height}, expected {tile_size}x{tile_size}"
                )
            m = _ORIGIN_RE.search(name)
            origin = (int(m.group(1)), int(m.group(2))) if m else (0, 0)
            tile = Tile(tile_size, origin, to_float(raster), label)
            out.append(LabeledTile(tile_id=name, tile=tile, label=label))
    return out


def save_labeled_tiles(tiles: Sequence[LabeledTile], out_dir, labels_name: str = "labels.csv") -> Path:
    """Write tiles as 16-bit PGMs plus the matching labels CSV; returns the CSV path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / labels_name
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_file", "label"])
        for t in tiles:
            save_raster(to_raster(t.tile.plane, depth=16), out_dir / t.tile_id)
            writer.writerow([t.tile_id, t.label])
    return csv_path
