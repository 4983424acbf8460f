"""Synthetic slides with planted tumors, and an oracle patch classifier.

Tumor pixels look exactly like other tissue; only the ground-truth polygon
(and therefore the oracle) knows where the tumor is.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import Polygon, TumorBedExtent, convex_hull, tumor_bed_extent, write_polygon
from .imaging import HsvBounds, SlideRaster, Tile, rgb_to_hsv, write_slide_bundle
from .inference import NEGATIVE, POSITIVE

# all inside the default keep-band
TISSUE_PALETTE = np.array(
    [(100, 140, 200), (120, 150, 190), (90, 130, 170), (110, 160, 200)], dtype=np.uint8
)
BACKGROUND_RGB = (242, 242, 242)
# ink / debris colours outside the band
ARTIFACT_PALETTE = np.array([(30, 30, 60), (220, 150, 180), (60, 120, 40)], dtype=np.uint8)
ARTIFACT_SIDE = 48


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    width: int
    height: int
    mpp: float
    tumor: Polygon | None = None
    tissue_density: float = 0.5
    artifacts: int = 0
    slide_id: str = "synth"


@dataclass(eq=False)
class SynthSlide:
    slide: SlideRaster
    tumor: Polygon | None
    tissue_pixels: int

    @property
    def label(self) -> str:
        return NEGATIVE if self.tumor is None else POSITIVE

    def gt_extent(self) -> TumorBedExtent | None:
        if self.tumor is None:
            return None
        return tumor_bed_extent(self.tumor.vertices, self.slide.mpp)


def _tissue_score(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Lobed elliptical distance from the slide centre; small values become tissue."""
    h, w = spec.height, spec.width
    dx = ((np.arange(w, dtype=np.float32) + 0.5 - w / 2.0) / (w / 2.0))[None, :]
    dy = ((np.arange(h, dtype=np.float32) + 0.5 - h / 2.0) / (h / 2.0))[:, None]
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    wobble = np.ones_like(r)
    for k in (2, 3, 5):
        amp = np.float32(rng.uniform(0.02, 0.08))
        wobble += amp * np.cos(k * phi + np.float32(rng.uniform(0, 2 * np.pi)))
    return (r / wobble).ravel()


def _select_smallest(score: np.ndarray, n: int) -> np.ndarray:
    """Boolean mask of exactly ``n`` smallest entries, ties going to lower indices."""
    out = np.zeros(score.size, dtype=bool)
    if n <= 0:
        return out
    if n >= score.size:
        out[:] = True
        return out
    cut = np.partition(score, n - 1)[n - 1]
    out = score < cut
    need = n - int(out.sum())
    ties = np.flatnonzero(score == cut)[:need]
    out[ties] = True
    return out


def generate_slide(spec: SynthSpec) -> SynthSlide:
    """Render one synthetic slide.

    Exactly ``round(tissue_density * width * height)`` pixels fall inside the
    HSV keep-band. Artifacts are painted over background pixels only.
    """
    if spec.width <= 0 or spec.height <= 0 or not spec.mpp > 0:
        raise SynthError("invalid slide dimensions or mpp")
    if not 0.0 <= spec.tissue_density <= 1.0:
        raise SynthError("tissue_density must be in [0, 1]")
    rng = np.random.default_rng(spec.seed)
    n_px = spec.width * spec.height
    n_tissue = int(round(spec.tissue_density * n_px))
    tissue = _select_smallest(_tissue_score(spec, rng), n_tissue)

    if spec.tumor is not None:
        _check_tumor_in_tissue(spec.tumor, tissue.reshape(spec.height, spec.width))

    pixels = np.empty((n_px, 3), dtype=np.uint8)
    pixels[:] = BACKGROUND_RGB
    shade = rng.integers(0, len(TISSUE_PALETTE), size=n_tissue)
    pixels[tissue] = TISSUE_PALETTE[shade]
    pixels = pixels.reshape(spec.height, spec.width, 3)
    tissue2d = tissue.reshape(spec.height, spec.width)

    for _ in range(spec.artifacts):
        side = min(ARTIFACT_SIDE, spec.width, spec.height)
        ax = int(rng.integers(0, spec.width - side + 1))
        ay = int(rng.integers(0, spec.height - side + 1))
        colour = ARTIFACT_PALETTE[int(rng.integers(0, len(ARTIFACT_PALETTE)))]
        region = pixels[ay:ay + side, ax:ax + side]
        region[~tissue2d[ay:ay + side, ax:ax + side]] = colour

    slide = SlideRaster(pixels, spec.mpp, spec.slide_id)
    return SynthSlide(slide, spec.tumor, n_tissue)


def _check_tumor_in_tissue(tumor: Polygon, tissue: np.ndarray) -> None:
    h, w = tissue.shape
    v = tumor.vertices
    if tumor.is_degenerate:
        raise SynthError("tumor polygon is degenerate")
    if v[:, 0].min() < 0 or v[:, 1].min() < 0 or v[:, 0].max() > w or v[:, 1].max() > h:
        raise SynthError("tumor outside slide bounds")
    x0, y0 = int(math.floor(v[:, 0].min())), int(math.floor(v[:, 1].min()))
    x1, y1 = int(math.ceil(v[:, 0].max())), int(math.ceil(v[:, 1].max()))
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = kernels.points_in_polygon(
        (xx.ravel() + 0.5).astype(np.float64),
        (yy.ravel() + 0.5).astype(np.float64),
        np.ascontiguousarray(v[:, 0]),
        np.ascontiguousarray(v[:, 1]),
    )
    if not np.all(tissue[y0:y1, x0:x1].ravel()[inside]):
        raise SynthError("tumor outside tissue")


def random_convex_tumor(rng: np.random.Generator, center: Sequence[float], radius: float, n_points: int = 24) -> Polygon:
    """Hull of jittered points on a randomly stretched and rotated ellipse."""
    t = np.sort(rng.uniform(0, 2 * np.pi, n_points))
    aspect = rng.uniform(0.55, 1.0)
    rad = radius * rng.uniform(0.85, 1.0, n_points)
    x, y = rad * np.cos(t), aspect * rad * np.sin(t)
    ang = rng.uniform(0, np.pi)
    c, s = math.cos(ang), math.sin(ang)
    pts = np.column_stack([center[0] + c * x - s * y, center[1] + s * x + c * y])
    return convex_hull(pts)


# ---------------------------------------------------------------------------
# Oracle classifier
# ---------------------------------------------------------------------------


def _clip_to_rect(v: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon ring against an axis-aligned box."""
    pts = [tuple(p) for p in v]
    for axis, bound, keep_above in ((0, x0, True), (0, x1, False), (1, y0, True), (1, y1, False)):
        if not pts:
            break
        out = []
        for i, cur in enumerate(pts):
            prev = pts[i - 1]
            cur_in = cur[axis] >= bound if keep_above else cur[axis] <= bound
            prev_in = prev[axis] >= bound if keep_above else prev[axis] <= bound
            if cur_in != prev_in:
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if cur_in:
                out.append(cur)
        pts = out
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _ring_area(v: np.ndarray) -> float:
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def tile_tumor_fraction(tile: Tile, tumor: Polygon | None) -> float:
    if tumor is None or tumor.is_degenerate:
        return 0.0
    clipped = _clip_to_rect(tumor.vertices, tile.x, tile.y, tile.x + tile.side, tile.y + tile.side)
    return _ring_area(clipped) / float(tile.side * tile.side)


@dataclass(frozen=True)
class OracleConfig:
    """Noise model of the oracle.

    A tile is truly positive when at least ``overlap_rule`` of its area is
    tumor (and the overlap is non-empty). Truly negative tiles flip to 1
    with probability ``p_fp``, positive ones to 0 with probability ``p_fn``.
    """

    p_fp: float = 0.0
    p_fn: float = 0.0
    overlap_rule: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("p_fp", "p_fn", "overlap_rule"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise SynthError(f"{name} must be in [0, 1], got {val}")


@dataclass
class OracleClassifier:
    tumor: Polygon | None
    config: OracleConfig = field(default_factory=OracleConfig)
    kind: str = "oracle"

    def tile_uniform(self, tile: Tile) -> float:
        # one uniform per tile, keyed by coordinates: scoring order never matters
        return float(np.random.default_rng([self.config.seed, tile.x, tile.y, tile.side]).random())

    def truth(self, tile: Tile) -> bool:
        frac = tile_tumor_fraction(tile, self.tumor)
        return frac > 0.0 and frac >= self.config.overlap_rule

    def score(self, slide, tiles: Sequence[Tile]) -> list[float]:
        cfg = self.config
        out = []
        for t in tiles:
            positive = self.truth(t)
            if cfg.p_fp > 0.0 or cfg.p_fn > 0.0:
                u = self.tile_uniform(t)
                if positive and u < cfg.p_fn:
                    positive = False
                elif not positive and u < cfg.p_fp:
                    positive = True
            out.append(1.0 if positive else 0.0)
        return out


def oracle_classifier(tumor: Polygon | None, cfg: OracleConfig | None = None) -> OracleClassifier:
    return OracleClassifier(tumor, cfg or OracleConfig())


# ---------------------------------------------------------------------------
# Cohorts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CohortSpec:
    seed: int = 0
    n_slides: int = 10
    width: int = 4096
    height: int = 4096
    mpp: float = 8.0
    tumor_free_fraction: float = 0.3
    tissue_density: float = 0.5
    artifacts: int = 4
    tumor_radius: tuple[float, float] = (700.0, 1100.0)
    prefix: str = "slide"

    @classmethod
    def from_dict(cls, doc: dict) -> "CohortSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise SynthError(f"unknown cohort spec keys: {sorted(unknown)}")
        doc = dict(doc)
        if "tumor_radius" in doc:
            doc["tumor_radius"] = tuple(float(r) for r in doc["tumor_radius"])
        spec = cls(**doc)
        if spec.n_slides < 1:
            raise SynthError("n_slides must be >= 1")
        if not 0.0 <= spec.tumor_free_fraction <= 1.0:
            raise SynthError("tumor_free_fraction must be in [0, 1]")
        return spec

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["tumor_radius"] = list(self.tumor_radius)
        return d


def cohort_slide_specs(cohort: CohortSpec) -> list[SynthSpec]:
    """Per-slide specs; exactly ``round(n * tumor_free_fraction)`` are tumor-free."""
    rng = np.random.default_rng(cohort.seed)
    n_free = int(math.floor(cohort.n_slides * cohort.tumor_free_fraction + 0.5))
    free = set(rng.permutation(cohort.n_slides)[:n_free].tolist())
    width_digits = max(3, len(str(cohort.n_slides - 1)))
    specs = []
    for i in range(cohort.n_slides):
        slide_seed = int(rng.integers(0, 2**31 - 1))
        srng = np.random.default_rng(slide_seed)
        tumor = None
        if i not in free:
            lo, hi = cohort.tumor_radius
            radius = float(srng.uniform(lo, hi))
            jitter = 0.1 * min(cohort.width, cohort.height)
            center = (
                cohort.width / 2.0 + srng.uniform(-jitter, jitter),
                cohort.height / 2.0 + srng.uniform(-jitter, jitter),
            )
            tumor = random_convex_tumor(srng, center, radius)
        specs.append(
            SynthSpec(
                seed=slide_seed,
                width=cohort.width,
                height=cohort.height,
                mpp=cohort.mpp,
                tumor=tumor,
                tissue_density=cohort.tissue_density,
                artifacts=cohort.artifacts,
                slide_id=f"{cohort.prefix}{i:0{width_digits}d}",
            )
        )
    return specs


def write_synth_slide(directory, synth: SynthSlide) -> dict:
    """Write the slide bundle and ground-truth polygon; returns the manifest entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    s = synth.slide
    write_slide_bundle(directory, s)
    gt_name = f"{s.slide_id}.gt.json"
    extent = synth.gt_extent()
    write_polygon(
        directory / gt_name,
        s.slide_id,
        s.mpp,
        synth.tumor,
        label=synth.label,
        width=s.width,
        height=s.height,
        extent=None if extent is None else extent.to_dict(),
    )
    return {
        "slide_id": s.slide_id,
        "label": synth.label,
        "bundle": f"{s.slide_id}.json",
        "ground_truth": gt_name,
        "tissue_pixels": synth.tissue_pixels,
        "gt_d_prim_mm": None if extent is None else extent.d_prim_mm,
    }


def write_manifest(directory, entries: list[dict], **extra) -> Path:
    path = Path(directory) / "manifest.json"
    doc = {"slides": entries}
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def palette_in_band(bounds: HsvBounds | None = None) -> bool:
    bounds = bounds or HsvBounds()
    tissue_ok = all(bounds.contains(*rgb_to_hsv(*map(int, c))) for c in TISSUE_PALETTE)
    bg_out = not bounds.contains(*rgb_to_hsv(*BACKGROUND_RGB))
    art_out = not any(bounds.contains(*rgb_to_hsv(*map(int, c))) for c in ARTIFACT_PALETTE)
    return tissue_ok and bg_out and art_out
