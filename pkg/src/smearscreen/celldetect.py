"""Complete-cell localization via Sobel gradients and a circular Hough transform.

Edge pixels vote along their gradient direction (both orientations) into a
3-D (radius, y, x) accumulator. Per-radius planes are normalized by the
circle circumference so a perfect single-pixel ring scores ~1 at every
radius, which makes the vote threshold a radius-independent fraction of a
full ring.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .imagecore import FloatPlane, Tile

# Defaults sized so that a complete cell fits a 71x71 tile: r_max <= 35 - margin.
DEFAULT_SIGMA = 2.0
DEFAULT_R_MIN = 12
DEFAULT_R_MAX = 30
DEFAULT_VOTE_THRESHOLD = 0.45
DEFAULT_NMS_RADIUS = 20
DEFAULT_MARGIN = 3
DEFAULT_MATCH_TOL = 5.0

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class GradientField:
    """Horizontal/vertical derivative planes plus their magnitude."""

    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray

    @property
    def width(self) -> int:
        return self.gx.shape[1]

    @property
    def height(self) -> int:
        return self.gx.shape[0]


@dataclass(frozen=True)
class CircleHit:
    """One detected cell candidate; votes is a normalized score in [0, 1]."""

    cx: float
    cy: float
    r: float
    votes: float = 1.0


@dataclass(frozen=True)
class DetectionReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    paper_ratio: float
    undefined: tuple[str, ...] = ()


def _correlate3x3(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(values, 1, mode="symmetric")
    out = np.zeros_like(values)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy : dy + values.shape[0], dx : dx + values.shape[1]]
    return out


def sobel_gradients(plane: FloatPlane) -> GradientField:
    """3x3 Sobel derivatives with mirror boundary handling."""
    if plane.width < 3 or plane.height < 3:
        raise ValidationError("plane must be at least 3x3 for Sobel gradients")
    gx = _correlate3x3(plane.values, _SOBEL_X)
    gy = _correlate3x3(plane.values, _SOBEL_Y)
    return GradientField(gx, gy, np.sqrt(gx**2 + gy**2))


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's between-class-variance threshold over a value histogram."""
    flat = values.ravel()
    hi = float(flat.max())
    if hi <= 0.0:
        return 0.0
    hist, edges = np.histogram(flat, bins=bins, range=(0.0, hi))
    p = hist.astype(np.float64) / flat.size
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(bins)
    between[valid] = (mu_total * w0[valid] - mu[valid]) ** 2 / (w0[valid] * w1[valid])
    # empty bins between well-separated modes give a flat optimum; center on it
    peak = np.nonzero(between >= between.max() - 1e-12)[0]
    return float(centers[int(peak[len(peak) // 2])])


def _accumulate(
    field: GradientField, r_values: np.ndarray, edge_mask: np.ndarray
) -> np.ndarray:
    """Vote along gradient directions; returns (n_radii, h, w) counts.

    Votes are splatted bilinearly over the four neighboring center bins so
    the accumulator varies smoothly instead of sprouting aliasing peaks.
    """
    h, w = edge_mask.shape
    ys, xs = np.nonzero(edge_mask)
    acc = np.zeros((len(r_values), h, w), dtype=np.float64)
    if len(ys) == 0:
        return acc
    mag = field.magnitude[ys, xs]
    ux = field.gx[ys, xs] / mag
    uy = field.gy[ys, xs] / mag
    for ri, r in enumerate(r_values):
        for sign in (1.0, -1.0):
            cx = xs + sign * r * ux
            cy = ys + sign * r * uy
            x0 = np.floor(cx).astype(np.intp)
            y0 = np.floor(cy).astype(np.intp)
            fx = cx - x0
            fy = cy - y0
            for dy, dx, wgt in (
                (0, 0, (1 - fy) * (1 - fx)),
                (0, 1, (1 - fy) * fx),
                (1, 0, fy * (1 - fx)),
                (1, 1, fy * fx),
            ):
                bx, by = x0 + dx, y0 + dy
                keep = (bx >= 0) & (bx < w) & (by >= 0) & (by < h)
                np.add.at(acc[ri], (by[keep], bx[keep]), wgt[keep])
    return acc


def _sliding_max_1d(a: np.ndarray, half: int, axis: int) -> np.ndarray:
    """Max over a centered window of 2*half+1 along one axis (edges clipped)."""
    if half == 0:
        return a
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    window = 2 * half + 1
    m = n + 2 * half
    # one-sided forward max by doubling over an -inf padded buffer:
    # buf[i] ends up as max(b[i .. i+window-1]) with b = [-inf*half, a, -inf*half]
    buf = np.full((m + window,) + a.shape[1:], -np.inf, dtype=a.dtype)
    buf[half : half + n] = a
    tmp = np.full_like(buf, -np.inf)
    covered = 1
    while covered < window:
        step = min(covered, window - covered)
        np.maximum(buf[:m], buf[step : m + step], out=tmp[:m])
        buf, tmp = tmp, buf
        covered += step
    return np.moveaxis(buf[:n].copy(), 0, axis)


def hough_circles(
    field: GradientField,
    r_min: int = DEFAULT_R_MIN,
    r_max: int = DEFAULT_R_MAX,
    vote_threshold: float = DEFAULT_VOTE_THRESHOLD,
    nms_radius: int = DEFAULT_NMS_RADIUS,
) -> list[CircleHit]:
    """Detect circles in a gradient field.

    Edge pixels (gradient magnitude above an Otsu-adaptive threshold) vote at
    distances r_min..r_max along +-gradient direction. Per-radius planes are
    divided by 2*pi*r; candidates above vote_threshold survive a greedy 3-D
    non-max suppression (nms_radius spatially, +-2 in radius) and come back
    sorted by descending votes. Centers and radii are refined to sub-pixel
    accuracy by a local vote-weighted centroid.
    """
    if not (0 < r_min <= r_max):
        raise ValidationError(f"bad radius range [{r_min}, {r_max}]")
    if r_max >= min(field.width, field.height) / 2:
        raise ValidationError("r_max must be smaller than half the image side")
    if not (0.0 < vote_threshold <= 1.0):
        raise ValidationError(f"vote_threshold must be in (0, 1], got {vote_threshold}")

    if float(field.magnitude.max()) == 0.0:
        return []
    edge_mask = field.magnitude > otsu_threshold(field.magnitude)
    r_values = np.arange(r_min, r_max + 1, dtype=np.float64)
    acc = _accumulate(field, r_values, edge_mask)
    acc = np.minimum(acc / (2.0 * math.pi * r_values)[:, None, None], 1.0)

    # candidates: 3-D local maxima (ties allowed, so clamped plateaus survive).
    # The spatial window stays at nms_radius/2: duplicates of one cell land
    # within a few pixels of each other, while a square window of the full
    # radius would reach sqrt(2)*nms_radius diagonally and could swallow a
    # genuinely weaker neighboring cell. Pairwise separation at the full
    # radius is the greedy pass's job below.
    local_max = _sliding_max_1d(acc, 2, axis=0)
    local_max = _sliding_max_1d(local_max, nms_radius // 2, axis=1)
    local_max = _sliding_max_1d(local_max, nms_radius // 2, axis=2)
    ris, cys, cxs = np.nonzero((acc >= vote_threshold) & (acc >= local_max - 1e-12))
    if len(ris) == 0:
        return []
    votes = acc[ris, cys, cxs]
    order = np.argsort(-votes, kind="stable")

    hits: list[CircleHit] = []
    kept: list[tuple[float, float, float]] = []  # (cx, cy, r) of accepted peaks
    nms_sq = float(nms_radius) ** 2
    for idx in order:
        ri, cy, cx = int(ris[idx]), int(cys[idx]), int(cxs[idx])
        r = float(r_values[ri])
        suppressed = any(
            (cx - kx) ** 2 + (cy - ky) ** 2 <= nms_sq and abs(r - kr) <= 2.0
            for kx, ky, kr in kept
        )
        if suppressed:
            continue
        kept.append((float(cx), float(cy), r))
        hits.append(_refine(acc, r_values, ri, cy, cx))
    return hits


def _refine(acc: np.ndarray, r_values: np.ndarray, ri: int, cy: int, cx: int) -> CircleHit:
    """Vote-weighted centroid over a small (r, y, x) neighborhood of a peak."""
    n_r, h, w = acc.shape
    y0, y1 = max(0, cy - 2), min(h, cy + 3)
    x0, x1 = max(0, cx - 2), min(w, cx + 3)
    r0, r1 = max(0, ri - 1), min(n_r, ri + 2)
    block = acc[r0:r1, y0:y1, x0:x1]
    total = block.sum()
    if total <= 0.0:
        return CircleHit(float(cx), float(cy), float(r_values[ri]), float(acc[ri, cy, cx]))
    rr, yy, xx = np.meshgrid(
        r_values[r0:r1], np.arange(y0, y1), np.arange(x0, x1), indexing="ij"
    )
    return CircleHit(
        cx=float((block * xx).sum() / total),
        cy=float((block * yy).sum() / total),
        r=float((block * rr).sum() / total),
        votes=float(acc[ri, cy, cx]),
    )


def select_complete_cell_tiles(
    plane: FloatPlane,
    hits: Sequence[CircleHit],
    size: int = 71,
    margin: int = DEFAULT_MARGIN,
) -> list[Tile]:
    """Cut one tile per hit, centered on the rounded hit center.

    A hit qualifies only if the disk of radius r + margin fits entirely in
    its tile; hits whose centered tile would cross the image border are
    dropped, not shifted.
    """
    biggest = max((h.r for h in hits), default=0.0)
    if size < 2 * (biggest + margin):
        raise ValidationError(
            f"tile size {size} cannot contain a radius-{biggest:.1f} cell with margin {margin}"
        )
    half = size // 2
    inner = min(half, size - 1 - half)  # distance from center pixel to nearest tile edge
    tiles = []
    for hit in hits:
        cx, cy = round(hit.cx), round(hit.cy)
        ox, oy = cx - half, cy - half
        if ox < 0 or oy < 0 or ox + size > plane.width or oy + size > plane.height:
            continue
        if hit.r + margin > inner:
            continue
        crop = plane.values[oy : oy + size, ox : ox + size].copy()
        tiles.append(Tile(size, (ox, oy), FloatPlane(crop)))
    return tiles


def detection_metrics(
    pred: Sequence[CircleHit],
    truth: Sequence[CircleHit],
    match_tol: float = DEFAULT_MATCH_TOL,
) -> DetectionReport:
    """Greedy one-to-one matching by ascending center distance.

    A (pred, truth) pair may match iff center distance <= match_tol and
    |delta r| <= match_tol. The historical quantity (FP+FN)/(TP+FP) is
    reported verbatim as paper_ratio next to standard precision/recall.
    """
    if match_tol <= 0:
        raise ValidationError("match_tol must be positive")
    pairs = []
    for i, p in enumerate(pred):
        for j, t in enumerate(truth):
            d = math.hypot(p.cx - t.cx, p.cy - t.cy)
            if d <= match_tol and abs(p.r - t.r) <= match_tol:
                pairs.append((d, i, j))
    pairs.sort(key=lambda e: (e[0], e[1], e[2]))
    used_p: set[int] = set()
    used_t: set[int] = set()
    tp = 0
    for _, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        tp += 1
    fp = len(pred) - tp
    fn = len(truth) - tp
    undefined = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
        paper_ratio = (fp + fn) / (tp + fp)
    else:
        precision, paper_ratio = 0.0, 0.0
        undefined += ["precision", "paper_ratio"]
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    return DetectionReport(tp, fp, fn, precision, recall, paper_ratio, tuple(undefined))


def write_hits_csv(hits: Sequence[CircleHit], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cx", "cy", "r", "votes"])
        for h in hits:
            writer.writerow([f"{h.cx:.3f}", f"{h.cy:.3f}", f"{h.r:.3f}", f"{h.votes:.4f}"])


def read_circles_csv(path) -> list[CircleHit]:
    """Read a `cx,cy,r[,votes|,label]` CSV into CircleHit records."""
    hits = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cx", "cy", "r"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected a header with cx,cy,r columns")
        for row in reader:
            votes = float(row["votes"]) if "votes" in row and row.get("votes") else 1.0
            hits.append(CircleHit(float(row["cx"]), float(row["cy"]), float(row["r"]), votes))
    return hits
