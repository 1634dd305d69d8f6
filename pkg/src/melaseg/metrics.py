"""Pixel confusion counting, overlap ratios, localization correctness and
average precision."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import BoundingBox, iou, iou_matrix, read_labels
from .tensor import ShapeError

UNDEFINED = float("nan")
LOCALIZATION_IOU = 0.8


def is_undefined(x) -> bool:
    return isinstance(x, float) and math.isnan(x)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsReport:
    accuracy: float
    dice: float
    jaccard: float
    sensitivity: float
    specificity: float

    NAMES = ("accuracy", "dice", "jaccard", "sensitivity", "specificity")


def count_confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask extents differ: prediction {pred.shape} vs truth {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num, den):
    return num / den if den else UNDEFINED


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    return MetricsReport(
        accuracy=_ratio(c.tp + c.tn, c.total),
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        jaccard=_ratio(c.tp, c.tp + c.fn + c.fp),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
    )


def compute_metrics_exact(c: ConfusionCounts) -> dict[str, Fraction | None]:
    """Same ratios as :func:`compute_metrics` in rational arithmetic."""
    def r(num, den):
        return Fraction(num, den) if den else None
    return {
        "accuracy": r(c.tp + c.tn, c.total),
        "dice": r(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "jaccard": r(c.tp, c.tp + c.fn + c.fp),
        "sensitivity": r(c.tp, c.tp + c.fn),
        "specificity": r(c.tn, c.tn + c.fp),
    }


def localization_correct(pred_box: BoundingBox, truth_box: BoundingBox,
                         threshold: float = LOCALIZATION_IOU) -> bool:
    return iou(pred_box, truth_box) > threshold


# ---------------------------------------------------------------- AP

@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    average_precision: float


def match_detections(det_boxes: Sequence[BoundingBox], confidences: Sequence[float],
                     truth_boxes: Sequence[BoundingBox], iou_threshold: float) -> list[bool]:
    """Greedy matching in descending confidence; each detection takes the
    highest-IOU still-unmatched truth with IOU >= threshold.

    Returned flags follow the descending-confidence order.
    """
    order = sorted(range(len(det_boxes)), key=lambda i: -confidences[i])
    if not truth_boxes:
        return [False] * len(order)
    ious = iou_matrix([det_boxes[i].corners() for i in order], [t.corners() for t in truth_boxes]) \
        if order else np.zeros((0, len(truth_boxes)))
    taken = np.zeros(len(truth_boxes), bool)
    flags = []
    for row in ious:
        cand = np.where(~taken & (row >= iou_threshold), row, -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], truth_count: int) -> PrCurve:
    """All-point AP from match flags already sorted by descending confidence."""
    if truth_count <= 0:
        return PrCurve(np.zeros(0), np.zeros(0), UNDEFINED)
    f = np.asarray(flags, dtype=bool)
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    recall = tp / truth_count
    precision = tp / np.maximum(tp + fp, 1)
    if f.size == 0:
        return PrCurve(recall, precision, 0.0)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([precision, [0.0]])
    # precision envelope: max precision at any recall >= r
    mpre = np.maximum.accumulate(mpre[::-1])[::-1][:-1]
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre))
    return PrCurve(recall, precision, ap)


def detection_ap(per_image_dets: Sequence[Sequence[tuple[BoundingBox, float]]],
                 per_image_truth: Sequence[Sequence[BoundingBox]], iou_threshold: float = 0.5) -> PrCurve:
    """Dataset AP: matching is per image, ranking is global by confidence."""
    scored = []
    for dets, truth in zip(per_image_dets, per_image_truth):
        boxes = [b for b, _ in dets]
        confs = [c for _, c in dets]
        flags = match_detections(boxes, confs, truth, iou_threshold)
        for conf, flag in zip(sorted(confs, reverse=True), flags):
            scored.append((conf, flag))
    # stable sort keeps per-image order for equal confidences
    scored.sort(key=lambda t: -t[0])
    return average_precision([f for _, f in scored], sum(len(t) for t in per_image_truth))


def localization_fraction(per_image_dets, per_image_truth, threshold: float = LOCALIZATION_IOU) -> float:
    """Fraction of truth boxes covered by some kept detection with IOU > threshold."""
    hit = total = 0
    for dets, truth in zip(per_image_dets, per_image_truth):
        total += len(truth)
        if not dets or not truth:
            continue
        m = iou_matrix([t.corners() for t in truth], [b.corners() for b, _ in dets])
        hit += int(np.count_nonzero(m.max(axis=1) > threshold))
    return hit / total if total else UNDEFINED


# ---------------------------------------------------------------- aggregation

@dataclass
class AggregateReport:
    stems: list
    per_image: list            # MetricsReport per stem
    counts: list               # ConfusionCounts per stem
    mean: MetricsReport        # mean of per-image metrics, undefined entries excluded
    pooled: MetricsReport      # metrics of summed counts
    excluded: dict             # metric name -> number of undefined per-image values
    ap: dict                   # iou threshold -> AP
    localization: float
    missing: list

    def csv_text(self) -> str:
        return report_csv(self)

    def table_text(self) -> str:
        return report_table(self)


def mean_metrics(reports: Sequence[MetricsReport]):
    values, excluded = {}, {}
    for name in MetricsReport.NAMES:
        xs = [getattr(r, name) for r in reports if not is_undefined(getattr(r, name))]
        excluded[name] = len(reports) - len(xs)
        values[name] = float(np.mean(xs)) if xs else UNDEFINED
    return MetricsReport(**values), excluded


def aggregate(stems, pred_masks, truth_masks, det_lists=None, truth_boxes=None,
              ap_thresholds=(0.5, 0.8), missing=()) -> AggregateReport:
    counts = [count_confusion(p, t) for p, t in zip(pred_masks, truth_masks)]
    per_image = [compute_metrics(c) for c in counts]
    mean, excluded = mean_metrics(per_image)
    pooled = compute_metrics(sum(counts, ConfusionCounts()))
    ap, loc = {}, UNDEFINED
    if det_lists is not None and truth_boxes is not None:
        for th in ap_thresholds:
            ap[th] = detection_ap(det_lists, truth_boxes, th).average_precision
        loc = localization_fraction(det_lists, truth_boxes)
    return AggregateReport(list(stems), per_image, counts, mean, pooled, excluded, ap, loc, list(missing))


CSV_COLUMNS = ("stem", "tp", "fp", "tn", "fn") + MetricsReport.NAMES


def _fmt(x) -> str:
    return "undefined" if is_undefined(x) else f"{x:.6f}"


def report_csv(rep: AggregateReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for stem, c, m in zip(rep.stems, rep.counts, rep.per_image):
        w.writerow([stem, c.tp, c.fp, c.tn, c.fn] + [_fmt(getattr(m, n)) for n in MetricsReport.NAMES])
    total = sum(rep.counts, ConfusionCounts())
    w.writerow(["__mean__", "", "", "", ""] + [_fmt(getattr(rep.mean, n)) for n in MetricsReport.NAMES])
    w.writerow(["__pooled__", total.tp, total.fp, total.tn, total.fn]
               + [_fmt(getattr(rep.pooled, n)) for n in MetricsReport.NAMES])
    return buf.getvalue()


def report_table(rep: AggregateReport) -> str:
    head = f"{'':<12}" + "".join(f"{n:>13}" for n in MetricsReport.NAMES)
    lines = [head]
    for label, m in (("per-image", rep.mean), ("pooled", rep.pooled)):
        lines.append(f"{label:<12}" + "".join(f"{_fmt(getattr(m, n)):>13}" for n in MetricsReport.NAMES))
    excl = {k: v for k, v in rep.excluded.items() if v}
    if excl:
        lines.append("undefined per-image values excluded: " + ", ".join(f"{k}={v}" for k, v in excl.items()))
    for th, v in rep.ap.items():
        lines.append(f"AP@{th:g}: {_fmt(v)}")
    if rep.ap:
        lines.append(f"localization correct (IOU > {LOCALIZATION_IOU:g}): {_fmt(rep.localization)}")
    lines.append(f"images: {len(rep.stems)}")
    if rep.missing:
        lines.append("unmatched stems skipped: " + " ".join(rep.missing))
    return "\n".join(lines) + "\n"


def evaluate_run(pred_dir, truth_dir, ap_thresholds=(0.5, 0.8), truth_stems=None) -> AggregateReport:
    """Compare ``pred_dir`` against ``truth_dir``.

    Both directories hold ``masks/<stem>.pgm``; boxes come from ``labels/<stem>.txt``
    (a sixth column is read as confidence, absent means 1).  Stems present on
    only one side are reported in ``missing`` and skipped.  ``truth_stems``
    optionally restricts both sides to one subset (e.g. a split).
    """
    from .netpbm import read_pgm

    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    p_stems = {p.stem for p in (pred_dir / "masks").glob("*.pgm")}
    t_stems = {p.stem for p in (truth_dir / "masks").glob("*.pgm")}
    if truth_stems is not None:
        t_stems &= set(truth_stems)
        p_stems &= set(truth_stems)
    stems = sorted(p_stems & t_stems)
    missing = sorted(p_stems ^ t_stems)
    preds, truths, dets, tboxes = [], [], [], []
    have_boxes = (truth_dir / "labels").is_dir() and (pred_dir / "labels").is_dir()
    for s in stems:
        preds.append(read_pgm(pred_dir / "masks" / f"{s}.pgm") >= 128)
        truths.append(read_pgm(truth_dir / "masks" / f"{s}.pgm") >= 128)
        if have_boxes:
            pl = pred_dir / "labels" / f"{s}.txt"
            tl = truth_dir / "labels" / f"{s}.txt"
            pb, _, pc = read_labels(pl) if pl.exists() else ([], [], [])
            tb = read_labels(tl)[0] if tl.exists() else []
            dets.append([(b, 1.0 if c is None else c) for b, c in zip(pb, pc)])
            tboxes.append(tb)
    return aggregate(stems, preds, truths, dets if have_boxes else None,
                     tboxes if have_boxes else None, ap_thresholds, missing)
