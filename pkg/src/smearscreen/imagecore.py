"""Raster ingestion, float conversion, Gaussian blur, and grid tiling.

Images are single-channel 8- or 16-bit grayscale. PGM (binary P5) is the
canonical fixture format; grayscale PNG is accepted for real data. All
arithmetic happens on float planes in [0, 1]; rasters are only an I/O
representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ImageFormatError, ValidationError

LABEL_HEALTHY = "healthy"
LABEL_INFECTED = "infected"
LABELS = (LABEL_HEALTHY, LABEL_INFECTED)

DEFAULT_TILE_SIZE = 71


@dataclass(frozen=True)
class Raster:
    """2-D unsigned grayscale image, row-major, 8 or 16 bits per sample."""

    width: int
    height: int
    depth: int
    pixels: np.ndarray  # shape (height, width), uint8 or uint16
    source: Optional[Path] = None

    def __post_init__(self):
        if self.depth not in (8, 16):
            raise ImageFormatError(f"unsupported bit depth {self.depth}")
        if self.pixels.shape != (self.height, self.width):
            raise ValidationError(
                f"pixel block {self.pixels.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if self.pixels.size and int(self.pixels.max()) >= (1 << self.depth):
            raise ValidationError("sample exceeds declared bit depth")


@dataclass(frozen=True)
class FloatPlane:
    """Row-major real-valued image plane.

    Values are in [0, 1] straight after conversion from a raster and
    unbounded after arithmetic such as mean subtraction.
    """

    values: np.ndarray  # shape (height, width), float64

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Tile:
    """Square crop of a source plane plus its provenance."""

    size: int
    origin: tuple[int, int]  # (x, y) top-left in the source raster
    plane: FloatPlane
    label: Optional[str] = None

    def __post_init__(self):
        if self.plane.values.shape != (self.size, self.size):
            raise ValidationError(
                f"tile plane {self.plane.values.shape} is not {self.size}x{self.size}"
            )
        if self.label is not None and self.label not in LABELS:
            raise ValidationError(f"unknown label {self.label!r}")


def _read_pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace/comment-separated ASCII integers; return them
    and the offset just past the single whitespace byte that ends the last one."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ImageFormatError("truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            try:
                tokens.append(int(data[i:j]))
            except ValueError:
                raise ImageFormatError(f"bad PGM header token {data[i:j]!r}") from None
            i = j
    # exactly one whitespace byte separates the maxval from the sample block
    if i >= len(data) or not data[i : i + 1].isspace():
        raise ImageFormatError("missing whitespace after PGM header")
    return tokens, i + 1


def _load_pgm(path: Path) -> Raster:
    data = path.read_bytes()
    if data[:2] == b"P6":
        raise ImageFormatError(f"{path}: color PPM not supported")
    if data[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    (width, height, maxval), offset = _read_pgm_tokens(data[2:], 3)
    offset += 2
    if maxval == 255:
        depth, dtype, nbytes = 8, np.uint8, width * height
    elif maxval == 65535:
        depth, dtype, nbytes = 16, ">u2", 2 * width * height
    else:
        raise ImageFormatError(f"{path}: unsupported PGM maxval {maxval}")
    block = data[offset : offset + nbytes]
    if len(block) != nbytes:
        raise ImageFormatError(f"{path}: truncated PGM sample block")
    pixels = np.frombuffer(block, dtype=dtype).reshape(height, width)
    return Raster(width, height, depth, pixels.astype(np.uint16 if depth == 16 else np.uint8), path)


def _load_png(path: Path) -> Raster:
    from PIL import Image

    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ImageFormatError(f"{path}: unreadable PNG ({exc})") from exc
    if img.mode == "L":
        depth = 8
        pixels = np.asarray(img, dtype=np.uint8)
    elif img.mode in ("I;16", "I;16B", "I"):
        depth = 16
        pixels = np.asarray(img, dtype=np.uint32)
        if pixels.size and pixels.max() > 65535:
            raise ImageFormatError(f"{path}: samples exceed 16 bits")
        pixels = pixels.astype(np.uint16)
    elif img.mode == "P":
        raise ImageFormatError(f"{path}: paletted PNG not supported")
    else:
        raise ImageFormatError(f"{path}: mode {img.mode} is not grayscale")
    height, width = pixels.shape
    return Raster(width, height, depth, pixels, path)


def load_raster(path) -> Raster:
    """Load a grayscale PGM (P5) or PNG image with no rescaling."""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        return _load_pgm(path)
    if suffix == ".png":
        return _load_png(path)
    # sniff by magic for extensionless files
    head = path.read_bytes()[:8]
    if head[:2] in (b"P5", b"P6"):
        return _load_pgm(path)
    if head == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    raise ImageFormatError(f"{path}: unrecognized image format")


def save_raster(raster: Raster, path) -> None:
    """Write a raster as binary PGM or PNG, chosen by file extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        maxval = 255 if raster.depth == 8 else 65535
        header = f"P5\n{raster.width} {raster.height}\n{maxval}\n".encode()
        if raster.depth == 8:
            block = raster.pixels.astype(np.uint8).tobytes()
        else:
            block = raster.pixels.astype(">u2").tobytes()
        path.write_bytes(header + block)
    elif suffix == ".png":
        from PIL import Image

        if raster.depth == 8:
            Image.fromarray(raster.pixels.astype(np.uint8), mode="L").save(path)
        else:
            Image.fromarray(raster.pixels.astype(np.uint16)).save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported output format {suffix!r}")


def to_float(raster: Raster) -> FloatPlane:
    """Map samples into [0, 1] by dividing by the full-scale value."""
    scale = float((1 << raster.depth) - 1)
    return FloatPlane(raster.pixels.astype(np.float64) / scale)


def to_raster(plane: FloatPlane, depth: int = 16, source: Optional[Path] = None) -> Raster:
    """Quantize a [0, 1] plane back to integer samples (values clipped)."""
    scale = float((1 << depth) - 1)
    q = np.rint(np.clip(plane.values, 0.0, 1.0) * scale)
    dtype = np.uint8 if depth == 8 else np.uint16
    return Raster(plane.width, plane.height, depth, q.astype(dtype), source)


def save_float_plane(plane: FloatPlane, path) -> tuple[float, float]:
    """Rescale an arbitrary plane to 16-bit, save it, record the range.

    The (min, max) used for rescaling goes to a `<path>.range.txt` sidecar so
    the absolute values stay recoverable. Returns (lo, hi).
    """
    path = Path(path)
    lo = float(plane.values.min())
    hi = float(plane.values.max())
    if hi > lo:
        scaled = (plane.values - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(plane.values)
    save_raster(to_raster(FloatPlane(scaled), depth=16), path)
    Path(str(path) + ".range.txt").write_text(f"min={lo!r}\nmax={hi!r}\n")
    return lo, hi


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel truncated at +-ceil(3*sigma)."""
    if not (isinstance(sigma, (int, float)) and math.isfinite(sigma) and sigma > 0):
        raise ValidationError(f"sigma must be a finite positive number, got {sigma!r}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(plane: FloatPlane, sigma: float) -> FloatPlane:
    """Separable Gaussian blur with mirror-reflect boundary handling.

    The boundary reflection duplicates the edge sample, which keeps the total
    mass of the plane exactly conserved.
    """
    kernel = gaussian_kernel_1d(sigma)
    radius = (len(kernel) - 1) // 2
    padded = np.pad(plane.values, radius, mode="symmetric")
    # horizontal pass then vertical pass, each as a sum of shifted slices
    h, w = plane.values.shape
    rows = np.zeros((h + 2 * radius, w), dtype=np.float64)
    for i, kv in enumerate(kernel):
        rows += kv * padded[:, i : i + w]
    out = np.zeros((h, w), dtype=np.float64)
    for i, kv in enumerate(kernel):
        out += kv * rows[i : i + h, :]
    return FloatPlane(out)


def tile_grid(plane: FloatPlane, size: int = DEFAULT_TILE_SIZE, stride: Optional[int] = None) -> list[Tile]:
    """Cut a plane into size x size tiles on a regular stride grid.

    Tiles are emitted in row-major order; partial tiles at the right/bottom
    border are discarded.
    """
    if stride is None:
        stride = size
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if size > min(plane.width, plane.height):
        raise ValidationError(
            f"tile size {size} exceeds plane {plane.width}x{plane.height}"
        )
    tiles = []
    for y in range(0, plane.height - size + 1, stride):
        for x in range(0, plane.width - size + 1, stride):
            crop = plane.values[y : y + size, x : x + size].copy()
            tiles.append(Tile(size, (x, y), FloatPlane(crop)))
    return tiles


def tile_filename(stem: str, tile: Tile, ext: str = "pgm") -> str:
    x, y = tile.origin
    return f"{stem}_x{x}_y{y}.{ext}"
