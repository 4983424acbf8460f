"""Tumor-bed estimation for whole-slide images.

Tiled patch scoring with stride voting, convex-hull extent (d1, d2, d_prim),
slide-level evaluation and k-means negative mining.
"""

__version__ = "0.1.0"

from ._accel import backend
from .geometry import (
    Point2,
    Polygon,
    Segment,
    TumorBedExtent,
    convex_hull,
    longest_perpendicular_chord,
    polygon_diameter,
    rotate_about_diagonal,
    tumor_bed_extent,
)
from .inference import InferenceConfig, predict_tumor_bed

__all__ = [
    "Point2",
    "Polygon",
    "Segment",
    "TumorBedExtent",
    "InferenceConfig",
    "backend",
    "convex_hull",
    "longest_perpendicular_chord",
    "polygon_diameter",
    "predict_tumor_bed",
    "rotate_about_diagonal",
    "tumor_bed_extent",
]
