"""Tiled scoring, stride-vote heatmaps and tumor-bed prediction."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from . import kernels
from .geometry import ExtentUndefinedError, Polygon, TumorBedExtent, convex_hull, tumor_bed_extent
from .imaging import (
    PNG_OPTIONS,
    BinaryMask,
    HsvBounds,
    SlideRaster,
    Tile,
    foreground_mask,
    grid_shape,
    tile_foreground_ratios,
    tile_grid,
)

log = logging.getLogger(__name__)

POSITIVE = "tumor-positive"
NEGATIVE = "tumor-negative"


class InferenceError(ValueError):
    pass


class ClassifierError(RuntimeError):
    """The patch classifier failed; the slide is aborted."""


@dataclass(frozen=True)
class PatchScore:
    tile: Tile
    p_tumor: float

    def __post_init__(self):
        if not (0.0 <= self.p_tumor <= 1.0):
            raise ClassifierError(f"probability out of range at ({self.tile.x}, {self.tile.y}): {self.p_tumor}")


class Classifier(Protocol):
    kind: str

    def score(self, slide: SlideRaster, tiles: Sequence[Tile]) -> Sequence[float]:
        ...


# ---------------------------------------------------------------------------
# Score-file classifier
# ---------------------------------------------------------------------------


def write_score_file(path, scores: Sequence[PatchScore]) -> None:
    lines = [f"{s.tile.x} {s.tile.y} {s.tile.side} {s.p_tumor!r}" for s in scores]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_score_file(path) -> dict[tuple[int, int, int], float]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ClassifierError(f"{path}:{lineno}: expected 'x y side p_tumor'")
        try:
            key = (int(parts[0]), int(parts[1]), int(parts[2]))
            p = float(parts[3])
        except ValueError as exc:
            raise ClassifierError(f"{path}:{lineno}: {exc}") from exc
        table[key] = p
    return table


class ScoreFileClassifier:
    """Replays precomputed per-tile probabilities."""

    kind = "score-file"

    def __init__(self, path):
        self.path = Path(path)
        self.table = read_score_file(self.path)

    def score(self, slide: SlideRaster, tiles: Sequence[Tile]) -> list[float]:
        out = []
        for t in tiles:
            try:
                out.append(self.table[(t.x, t.y, t.side)])
            except KeyError:
                raise ClassifierError(f"{self.path}: no score for tile ({t.x}, {t.y}, {t.side})") from None
        return out


# ---------------------------------------------------------------------------
# Scoring and heatmap
# ---------------------------------------------------------------------------


def score_tiles(
    slide: SlideRaster,
    classifier: Classifier,
    tiles: Sequence[Tile],
    mask: BinaryMask | None = None,
    fg_threshold: float = 0.25,
    bounds: HsvBounds | None = None,
    workers: int = 1,
) -> list[PatchScore]:
    """Score tiles whose foreground ratio reaches ``fg_threshold``.

    Background tiles are skipped and produce no score. With ``workers > 1``
    the kept tiles are split into contiguous chunks scored on a thread pool;
    output order always follows input order.
    """
    if mask is None:
        mask = foreground_mask(slide, bounds)
    ratios = tile_foreground_ratios(list(tiles), mask)
    kept = [
        Tile(t.x, t.y, t.side, float(r)) for t, r in zip(tiles, ratios) if r >= fg_threshold
    ]
    if not kept:
        return []
    if workers > 1 and len(kept) > 1:
        n_chunks = min(workers, len(kept))
        bounds_ = np.linspace(0, len(kept), n_chunks + 1).astype(int)
        chunks = [kept[a:b] for a, b in zip(bounds_[:-1], bounds_[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: list(classifier.score(slide, c)), chunks))
        probs = [p for part in parts for p in part]
    else:
        probs = list(classifier.score(slide, kept))
    if len(probs) != len(kept):
        raise ClassifierError(f"classifier returned {len(probs)} scores for {len(kept)} tiles")
    out = []
    for t, p in zip(kept, probs):
        p = float(p)
        if not math.isfinite(p):
            raise ClassifierError(f"non-finite probability at ({t.x}, {t.y})")
        out.append(PatchScore(t, p))
    return out


@dataclass(frozen=True, eq=False)
class Heatmap:
    vote_sum: np.ndarray
    vote_count: np.ndarray
    cell_size: int
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.vote_sum.shape

    def mean(self) -> np.ndarray:
        out = np.zeros(self.vote_sum.shape, dtype=np.float64)
        hit = self.vote_count > 0
        out[hit] = self.vote_sum[hit] / self.vote_count[hit]
        return out

    def merge(self, other: "Heatmap") -> "Heatmap":
        if self.shape != other.shape or self.cell_size != other.cell_size or self.origin != other.origin:
            raise InferenceError("heatmap geometry mismatch")
        return Heatmap(self.vote_sum + other.vote_sum, self.vote_count + other.vote_count, self.cell_size, self.origin)


def _canonical(scores: Sequence[PatchScore]) -> list[PatchScore]:
    return sorted(scores, key=lambda s: (s.tile.y, s.tile.x, s.tile.side, s.p_tumor))


def accumulate_heatmap(
    scores: Sequence[PatchScore],
    side: int,
    stride: int,
    dims: tuple[int, int],
    cell_size: int | None = None,
) -> Heatmap:
    """Add every tile's probability to the cells it covers.

    A cell is covered when its centre lies inside the tile footprint. Scores
    are applied in a canonical tile order, so the result does not depend on
    the order of ``scores`` at all.
    """
    cell_size = stride if cell_size is None else cell_size
    if cell_size < 1 or stride % cell_size:
        raise InferenceError(f"cell_size {cell_size} must divide stride {stride}")
    width, height = dims
    rows, cols = grid_shape(width, height, cell_size)
    vote_sum = np.zeros((rows, cols), dtype=np.float64)
    vote_count = np.zeros((rows, cols), dtype=np.int64)
    ordered = _canonical(scores)
    for s in ordered:
        t = s.tile
        if t.x < 0 or t.y < 0 or t.x >= width or t.y >= height:
            raise InferenceError(f"tile ({t.x}, {t.y}) outside {width}x{height}")
    if ordered:
        xs = np.array([s.tile.x for s in ordered], dtype=np.float64)
        ys = np.array([s.tile.y for s in ordered], dtype=np.float64)
        sides = np.array([s.tile.side for s in ordered], dtype=np.float64)
        probs = np.array([s.p_tumor for s in ordered], dtype=np.float64)
        kernels.accumulate_votes(xs, ys, sides, probs, float(cell_size), vote_sum, vote_count)
    return Heatmap(vote_sum, vote_count, cell_size)


def threshold_heatmap(h: Heatmap, tau: float) -> BinaryMask:
    if not 0.0 <= tau <= 1.0:
        raise InferenceError(f"tau must be in [0, 1], got {tau}")
    bits = (h.vote_count > 0) & (h.mean() >= tau)
    return BinaryMask(bits, h.cell_size, h.origin)


def slide_label(mask: BinaryMask) -> str:
    return POSITIVE if mask.bits.any() else NEGATIVE


# ---------------------------------------------------------------------------
# Whole-slide prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InferenceConfig:
    side: int = 512
    stride: int = 256
    tau: float = 0.5
    fg_threshold: float = 0.25
    hsv: HsvBounds = field(default_factory=HsvBounds)
    cell_size: int | None = None
    workers: int = 1


@dataclass(eq=False)
class SlidePrediction:
    slide_id: str
    label: str
    mask: BinaryMask
    heatmap: Heatmap
    hull: Polygon | None
    extent: TumorBedExtent | None
    scores: list[PatchScore]
    mpp: float
    dims: tuple[int, int]

    @property
    def positive(self) -> bool:
        return self.label == POSITIVE


def predict_tumor_bed(slide: SlideRaster, classifier: Classifier, config: InferenceConfig | None = None) -> SlidePrediction:
    """Score, vote, threshold and summarise one slide.

    A positive slide whose true cells do not span a 2-D hull (one cell, or
    cells on one line) keeps its positive label but gets no extent.
    """
    cfg = config or InferenceConfig()
    tiles = tile_grid(slide.width, slide.height, cfg.side, cfg.stride)
    fg = foreground_mask(slide, cfg.hsv)
    scores = score_tiles(slide, classifier, tiles, fg, cfg.fg_threshold, workers=cfg.workers)
    dims = (slide.width, slide.height)
    heat = accumulate_heatmap(scores, cfg.side, cfg.stride, dims, cfg.cell_size)
    mask = threshold_heatmap(heat, cfg.tau)
    label = slide_label(mask)
    hull = extent = None
    if label == POSITIVE:
        centers = mask.cell_centers()
        hull = convex_hull(centers)
        try:
            extent = tumor_bed_extent(centers, slide.mpp)
        except ExtentUndefinedError:
            log.info("%s: positive cells do not span an area; no extent", slide.slide_id)
    return SlidePrediction(slide.slide_id, label, mask, heat, hull, extent, scores, slide.mpp, dims)


def write_heatmap_png(path, heat: Heatmap, tau: float) -> None:
    path = Path(path)
    img = np.floor(heat.mean() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG", **PNG_OPTIONS)
    meta = {"cell_size": heat.cell_size, "origin": list(heat.origin), "tau": tau}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
