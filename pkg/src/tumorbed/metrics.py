"""Slide-level evaluation: confusion matrix, Dice and d_prim error."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import ExtentUndefinedError, Polygon, TumorBedExtent, read_polygon, tumor_bed_extent
from .imaging import BinaryMask, rasterize_polygon
from .inference import NEGATIVE, POSITIVE

DEFAULT_DICE_CELL = 32


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix2:
    """Rows are ground truth (negative, positive); columns are predictions."""

    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "ConfusionMatrix2":
        (tn, fp), (fn, tp) = rows
        return cls(int(tn), int(fp), int(fn), int(tp))

    def rows(self) -> list[list[int]]:
        return [[self.tn, self.fp], [self.fn, self.tp]]

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            return math.nan
        return (self.tn + self.tp) / self.total


def dice(a: BinaryMask, b: BinaryMask) -> float:
    if not a.same_geometry(b):
        raise MetricsError("mask geometry mismatch")
    na, nb = a.count(), b.count()
    if na + nb == 0:
        raise MetricsError("Dice undefined: both masks empty")
    inter = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * inter / (na + nb)


def dprim_error(pred: TumorBedExtent, gt: TumorBedExtent) -> float:
    if pred is None or gt is None:
        raise MetricsError("missing extent; apply the exclusion rule first")
    return abs(pred.d_prim_mm - gt.d_prim_mm)


@dataclass(frozen=True)
class SlideEval:
    slide_id: str
    gt_label: str
    pred_label: str
    dice: float | None = None
    dprim_error_mm: float | None = None
    included_in_segmentation: bool = False
    note: str = ""


def confusion(slide_evals: Iterable[SlideEval]) -> ConfusionMatrix2:
    counts = {"tn": 0, "fp": 0, "fn": 0, "tp": 0}
    for ev in slide_evals:
        for lab in (ev.gt_label, ev.pred_label):
            if lab not in (POSITIVE, NEGATIVE):
                raise MetricsError(f"{ev.slide_id}: unknown label {lab!r}")
        gt_pos = ev.gt_label == POSITIVE
        pr_pos = ev.pred_label == POSITIVE
        key = ("tp" if pr_pos else "fn") if gt_pos else ("fp" if pr_pos else "tn")
        counts[key] += 1
    return ConfusionMatrix2(**counts)


@dataclass(frozen=True, eq=False)
class SlideRecord:
    """Label plus outline for one slide: a prediction (hull) or a ground truth."""

    slide_id: str
    label: str
    polygon: Polygon | None
    mpp: float
    dims: tuple[int, int]
    extent: TumorBedExtent | None = None


@dataclass
class EvalReport:
    matrix: ConfusionMatrix2
    mean_dice: float
    mean_dprim_error_mm: float
    n_excluded: int
    slides: list[SlideEval] = field(default_factory=list)
    dice_cell_size: int = DEFAULT_DICE_CELL

    @property
    def n_included(self) -> int:
        return sum(1 for s in self.slides if s.included_in_segmentation)

    def to_dict(self) -> dict:
        return {
            "confusion": self.matrix.rows(),
            "accuracy": _finite_or_none(self.matrix.accuracy),
            "mean_dice": _finite_or_none(self.mean_dice),
            "mean_dprim_error_mm": _finite_or_none(self.mean_dprim_error_mm),
            "n_included": self.n_included,
            "n_excluded": self.n_excluded,
            "dice_cell_size": self.dice_cell_size,
            "slides": [s.__dict__ for s in self.slides],
        }

    def render_table(self, sampling: str = "-", weighting: str = "-") -> str:
        """One-row text table: sampling, weighting, Dice, error, confusion."""
        (tn, fp), (fn, tp) = self.matrix.rows()
        w = max(len(str(v)) for v in (tn, fp, fn, tp))
        header = f"{'Sampling':<10} {'Weighting':<10} {'Dice':>6} {'Error (mm)':>11}  Cfs. mtx."
        fmt = lambda x: "n/a" if x is None or math.isnan(x) else f"{x:.2f}"  # noqa: E731
        row1 = f"{sampling:<10} {weighting:<10} {fmt(self.mean_dice):>6} {fmt(self.mean_dprim_error_mm):>11}  [{tn:>{w}} {fp:>{w}}]"
        row2 = f"{'':<10} {'':<10} {'':>6} {'':>11}  [{fn:>{w}} {tp:>{w}}]"
        return "\n".join([header, row1, row2])


def _finite_or_none(x: float) -> float | None:
    return None if x is None or math.isnan(x) else x


def _extent_or_none(record: SlideRecord) -> TumorBedExtent | None:
    if record.extent is not None:
        return record.extent
    if record.polygon is None:
        return None
    try:
        return tumor_bed_extent(record.polygon.vertices, record.mpp)
    except ExtentUndefinedError:
        return None


def evaluate_slide(pred: SlideRecord, gt: SlideRecord, cell_size: int = DEFAULT_DICE_CELL) -> SlideEval:
    """Segmentation metrics only when both ground truth and prediction are positive."""
    if pred.label != POSITIVE or gt.label != POSITIVE:
        return SlideEval(pred.slide_id, gt.label, pred.label)
    pred_ext = _extent_or_none(pred)
    gt_ext = _extent_or_none(gt)
    if pred_ext is None or gt_ext is None:
        # no measurable bed: counted in the matrix, excluded from the means
        return SlideEval(pred.slide_id, gt.label, pred.label, note="extent undefined")
    dims = gt.dims
    a = rasterize_polygon(pred.polygon, cell_size, dims)
    b = rasterize_polygon(gt.polygon, cell_size, dims)
    try:
        d = dice(a, b)
    except MetricsError:
        d = 0.0
    return SlideEval(pred.slide_id, gt.label, pred.label, d, dprim_error(pred_ext, gt_ext), True)


def evaluate_cohort(
    predictions: Mapping[str, SlideRecord] | Sequence[SlideRecord],
    ground_truths: Mapping[str, SlideRecord] | Sequence[SlideRecord],
    cell_size: int = DEFAULT_DICE_CELL,
) -> EvalReport:
    preds = _by_id(predictions)
    gts = _by_id(ground_truths)
    if not gts:
        raise MetricsError("empty cohort")
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise MetricsError(f"slide id mismatch: no prediction for {missing}, no ground truth for {extra}")
    evals = [evaluate_slide(preds[sid], gts[sid], cell_size) for sid in sorted(gts)]
    inc = [e for e in evals if e.included_in_segmentation]
    n_gt_pos = sum(1 for e in evals if e.gt_label == POSITIVE)
    mean_dice = float(np.mean([e.dice for e in inc])) if inc else math.nan
    mean_err = float(np.mean([e.dprim_error_mm for e in inc])) if inc else math.nan
    return EvalReport(confusion(evals), mean_dice, mean_err, n_gt_pos - len(inc), evals, cell_size)


def _by_id(records) -> dict[str, SlideRecord]:
    if isinstance(records, Mapping):
        return dict(records)
    out = {}
    for r in records:
        if r.slide_id in out:
            raise MetricsError(f"duplicate slide id {r.slide_id}")
        out[r.slide_id] = r
    return out


# ---------------------------------------------------------------------------
# Loading prediction / ground-truth directories
# ---------------------------------------------------------------------------


def _record_from_polygon_doc(path: Path) -> SlideRecord:
    slide_id, mpp, poly = read_polygon(path)
    doc = json.loads(path.read_text())
    label = doc.get("label", POSITIVE if poly is not None else NEGATIVE)
    dims = (int(doc["width"]), int(doc["height"]))
    ext = doc.get("extent")
    extent = TumorBedExtent.from_dict(ext) if ext else None
    return SlideRecord(slide_id, label, poly, mpp, dims, extent)


def load_records(directory, suffix: str) -> dict[str, SlideRecord]:
    """Read every ``*<suffix>`` polygon document in ``directory``."""
    out = {}
    for path in sorted(Path(directory).glob(f"*{suffix}")):
        rec = _record_from_polygon_doc(path)
        out[rec.slide_id] = rec
    return out


def write_report(directory, report: EvalReport, sampling: str = "-", weighting: str = "-") -> tuple[Path, Path]:
    directory = Path(directory)
    json_path = directory / "report.json"
    txt_path = directory / "report.txt"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    txt_path.write_text(report.render_table(sampling, weighting) + "\n")
    return json_path, txt_path
