"""Slide rasters, HSV tissue masks, tile grids and polygon rasterisation."""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .geometry import Polygon


class ImagingError(ValueError):
    pass


class SlideFormatError(ImagingError):
    pass


@dataclass(frozen=True)
class HsvBounds:
    """Open interval bounds of the tissue band; ``keep=False`` inverts the mask."""

    h_lo: float = 0.5
    h_hi: float = 0.65
    s_lo: float = 0.1
    v_lo: float = 0.5
    v_hi: float = 0.9
    keep: bool = True

    def as_array(self) -> np.ndarray:
        return np.array([self.h_lo, self.h_hi, self.s_lo, self.v_lo, self.v_hi], dtype=np.float64)

    def contains(self, h: float, s: float, v: float) -> bool:
        inside = self.h_lo < h < self.h_hi and s > self.s_lo and self.v_lo < v < self.v_hi
        return inside if self.keep else not inside


@dataclass(frozen=True, eq=False)
class SlideRaster:
    pixels: np.ndarray
    mpp: float
    slide_id: str = "slide"
    level_downsample: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ImagingError(f"expected HxWx3 uint8 pixels, got {px.shape} {px.dtype}")
        if not self.mpp > 0:
            raise ImagingError(f"mpp must be positive, got {self.mpp}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean grid of ``cell_size``-pixel cells anchored at ``origin``."""

    bits: np.ndarray
    cell_size: int = 1
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise ImagingError(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        if self.cell_size < 1:
            raise ImagingError("cell_size must be >= 1")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def same_geometry(self, other: "BinaryMask") -> bool:
        return self.shape == other.shape and self.cell_size == other.cell_size and self.origin == other.origin

    def _check(self, other: "BinaryMask") -> None:
        if not self.same_geometry(other):
            raise ImagingError("mask geometry mismatch")

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        self._check(other)
        return BinaryMask(self.bits & other.bits, self.cell_size, self.origin)

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        self._check(other)
        return BinaryMask(self.bits | other.bits, self.cell_size, self.origin)

    def cell_centers(self) -> np.ndarray:
        """Level-0 pixel coordinates of the centres of true cells, shape (n, 2)."""
        rows, cols = np.nonzero(self.bits)
        x = self.origin[0] + (cols + 0.5) * self.cell_size
        y = self.origin[1] + (rows + 0.5) * self.cell_size
        return np.column_stack([x, y]).astype(np.float64)


@dataclass(frozen=True)
class Tile:
    x: int
    y: int
    side: int = 512
    foreground_ratio: float = field(default=0.0, compare=False)


def rgb_to_hsv(r: int, g: int, b: int) -> tuple[float, float, float]:
    """Hexcone HSV of 8-bit channels, each component in [0, 1]."""
    for c in (r, g, b):
        if not 0 <= c <= 255:
            raise ImagingError(f"channel out of range: {c}")
    return colorsys.rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0)


def hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(h, s, v)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def foreground_mask(slide: SlideRaster, bounds: HsvBounds | None = None) -> BinaryMask:
    bounds = bounds or HsvBounds()
    bits = kernels.hsv_band_mask(np.ascontiguousarray(slide.pixels), bounds.as_array())
    if not bounds.keep:
        bits = ~bits
    return BinaryMask(bits, 1, (0.0, 0.0))


def _positions(extent: int, side: int, stride: int) -> list[int]:
    if extent <= side:
        return [0]
    pos = list(range(0, extent - side + 1, stride))
    if pos[-1] + side < extent:
        pos.append(extent - side)
    return pos


def tile_grid(width: int, height: int, side: int = 512, stride: int = 256) -> list[Tile]:
    """Row-major tile placements covering every pixel.

    Tiles sit at multiples of ``stride``; a final row/column is clamped
    inward when the stride grid does not reach the raster edge. A raster
    smaller than ``side`` gets a single tile at the origin.
    """
    if side <= 0 or stride <= 0:
        raise ImagingError("side and stride must be positive")
    if stride > side:
        raise ImagingError("uncovered pixels: stride exceeds tile side")
    if width <= 0 or height <= 0:
        raise ImagingError("raster dimensions must be positive")
    xs = _positions(width, side, stride)
    ys = _positions(height, side, stride)
    return [Tile(x, y, side) for y in ys for x in xs]


def _integral(bits: np.ndarray) -> np.ndarray:
    dtype = np.int32 if bits.size < 2**31 else np.int64
    sat = np.zeros((bits.shape[0] + 1, bits.shape[1] + 1), dtype=dtype)
    np.cumsum(np.cumsum(bits, axis=0, dtype=dtype), axis=1, out=sat[1:, 1:])
    return sat


def _footprint(tile: Tile, mask: BinaryMask) -> tuple[int, int, int, int]:
    cs = mask.cell_size
    c0 = int(math.floor((tile.x - mask.origin[0]) / cs))
    r0 = int(math.floor((tile.y - mask.origin[1]) / cs))
    c1 = int(math.ceil((tile.x + tile.side - mask.origin[0]) / cs))
    r1 = int(math.ceil((tile.y + tile.side - mask.origin[1]) / cs))
    return max(r0, 0), min(r1, mask.height), max(c0, 0), min(c1, mask.width)


def tile_foreground_ratios(tiles: list[Tile], mask: BinaryMask) -> np.ndarray:
    """Fraction of true mask cells under each tile footprint (clipped to the mask)."""
    sat = _integral(mask.bits)
    out = np.zeros(len(tiles), dtype=np.float64)
    for i, t in enumerate(tiles):
        r0, r1, c0, c1 = _footprint(t, mask)
        area = (r1 - r0) * (c1 - c0)
        if area <= 0:
            continue
        hits = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
        out[i] = hits / area
    return out


def tile_foreground_ratio(tile: Tile, mask: BinaryMask) -> float:
    return float(tile_foreground_ratios([tile], mask)[0])


def grid_shape(width: float, height: float, cell_size: int) -> tuple[int, int]:
    return int(math.ceil(height / cell_size)), int(math.ceil(width / cell_size))


def rasterize_polygon(
    poly: Polygon | None,
    cell_size: int,
    bounds: tuple[float, float],
    origin: tuple[float, float] = (0.0, 0.0),
) -> BinaryMask:
    """Mark cells whose centre is inside ``poly`` (even-odd rule).

    ``bounds`` is the (width, height) extent in pixels; the grid has
    ``ceil(extent / cell_size)`` cells per axis. ``None`` or a degenerate
    polygon yields an all-false mask.
    """
    rows, cols = grid_shape(bounds[0], bounds[1], cell_size)
    bits = np.zeros((rows, cols), dtype=bool)
    if poly is None or poly.is_degenerate:
        return BinaryMask(bits, cell_size, origin)
    v = poly.vertices
    # only test cells inside the polygon's bounding box
    lo = np.floor((v.min(axis=0) - origin) / cell_size).astype(int)
    hi = np.ceil((v.max(axis=0) - origin) / cell_size).astype(int)
    c0, r0 = max(lo[0], 0), max(lo[1], 0)
    c1, r1 = min(hi[0] + 1, cols), min(hi[1] + 1, rows)
    if c1 <= c0 or r1 <= r0:
        return BinaryMask(bits, cell_size, origin)
    cc, rr = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1))
    px = origin[0] + (cc.ravel() + 0.5) * cell_size
    py = origin[1] + (rr.ravel() + 0.5) * cell_size
    inside = kernels.points_in_polygon(
        px.astype(np.float64), py.astype(np.float64), np.ascontiguousarray(v[:, 0]), np.ascontiguousarray(v[:, 1])
    )
    bits[r0:r1, c0:c1] = inside.reshape(r1 - r0, c1 - c0)
    return BinaryMask(bits, cell_size, origin)


# ---------------------------------------------------------------------------
# On-disk slide bundles and mask images
# ---------------------------------------------------------------------------

PNG_OPTIONS = {"compress_level": 6, "optimize": False}


def bundle_paths(directory, slide_id: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{slide_id}.png", d / f"{slide_id}.json"


def write_slide_bundle(directory, slide: SlideRaster, **extra) -> Path:
    """Write ``<id>.png`` and its ``<id>.json`` metadata sidecar; returns the sidecar path."""
    img_path, meta_path = bundle_paths(directory, slide.slide_id)
    Image.fromarray(slide.pixels).save(img_path, format="PNG", **PNG_OPTIONS)
    meta = {
        "slide_id": slide.slide_id,
        "image": img_path.name,
        "width": slide.width,
        "height": slide.height,
        "mpp": slide.mpp / slide.level_downsample,
        "level_downsample": slide.level_downsample,
    }
    meta.update(extra)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta_path


def read_slide_bundle(path, mpp_override: float | None = None) -> SlideRaster:
    """Load a bundle from its metadata sidecar (or from the image next to it)."""
    path = Path(path)
    meta_path = path if path.suffix == ".json" else path.with_suffix(".json")
    if not meta_path.exists():
        raise SlideFormatError(f"{meta_path}: metadata sidecar not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SlideFormatError(f"{meta_path}: {exc}") from exc
    mpp = mpp_override if mpp_override is not None else meta.get("mpp")
    if mpp is None:
        raise SlideFormatError(f"{meta_path}: missing mpp")
    img_path = meta_path.parent / meta.get("image", meta_path.with_suffix(".png").name)
    with Image.open(img_path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    downsample = float(meta.get("level_downsample", 1.0))
    return SlideRaster(pixels, float(mpp) * downsample, str(meta.get("slide_id", meta_path.stem)), downsample)


def write_mask_png(path, mask: BinaryMask, **extra) -> None:
    path = Path(path)
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8)).save(path, format="PNG", **PNG_OPTIONS)
    meta = {"cell_size": mask.cell_size, "origin": list(mask.origin), "width": mask.width, "height": mask.height}
    meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_mask_png(path) -> BinaryMask:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with Image.open(path) as im:
        bits = np.asarray(im.convert("L")) >= 128
    return BinaryMask(bits, int(meta["cell_size"]), tuple(meta.get("origin", (0.0, 0.0))))
