"""Acceptance suite.  Each test records one PASS/FAIL line, shown in the
terminal summary, then asserts.  The synthetic training runs are shared with
the rest of the suite through session fixtures in conftest."""
import math
import time
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_limits

from melaseg import gradcheck
from melaseg.detector import BoundingBox, Detection, DetectorConfig, iou_corners, loss_from_decoded, nms
from melaseg.experiments import run_detection, run_finetune, run_segmentation
from melaseg.metrics import ConfusionCounts, average_precision, compute_metrics, compute_metrics_exact
from melaseg.pipeline import PipelineConfig, run_pipeline
from melaseg.segmenter import compute_mfb, seg_loss

from oracles import brute_nms, exact_staircase_ap, raster_iou, staircase_ap
from test_data import check_round_trip, round_trip_fixture
from test_detector import _assignment, _decoded, _random_set
from test_pipeline import _untrained

FIFTEEN_MINUTES = 15 * 60


def record(log, number, title, ok, detail):
    log.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
    assert ok, detail


def test_criterion_1_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    with threadpool_limits(1):
        reports = list(gradcheck.run_suite(range(20)))
    seconds = time.perf_counter() - t0
    worst = max(rep.max_rel_error for _, _, rep in reports)
    failed = [(name, seed) for name, seed, rep in reports if not (rep.passed and rep.max_rel_error < 1e-4)]
    names = sorted({name for name, _, _ in reports})
    ok = not failed and seconds < 60
    record(acceptance_log, 1, "analytic vs finite-difference gradients", ok,
           f"{len(names)} checks x 20 seeds, worst rel err {worst:.2e}, failures {failed}, {seconds:.1f}s")


def _ratio_oracle(c):
    tp, fp, tn, fn = c.tp, c.fp, c.tn, c.fn

    def frac(a, b):
        return None if b == 0 else a / b

    return {"accuracy": frac(tp + tn, tp + tn + fp + fn), "dice": frac(2 * tp, 2 * tp + fp + fn),
            "jaccard": frac(tp, tp + fp + fn), "sensitivity": frac(tp, tp + fn),
            "specificity": frac(tn, tn + fp)}


def test_criterion_2_metric_identities(acceptance_log):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    bad = 0
    for k in range(10_000):
        hi = 10 ** int(rng.integers(1, 7))
        vals = rng.integers(0, hi, 4)
        if k % 10 == 0:
            vals[rng.integers(0, 4, 2)] = 0   # exercise the undefined cases
        c = ConfusionCounts(*(int(v) for v in vals))
        exact = compute_metrics_exact(c)
        j = exact["jaccard"]
        if j is not None and exact["dice"] != 2 * j / (1 + j):
            bad += 1
        m = compute_metrics(c)
        for name, want in _ratio_oracle(c).items():
            got = getattr(m, name)
            if want is None:
                bad += not math.isnan(got)
            elif abs(got - want) > 1e-12:
                bad += 1
    seconds = time.perf_counter() - t0
    record(acceptance_log, 2, "Dice/Jaccard identity and ratio oracles", bad == 0 and seconds < 5,
           f"10000 random counts, {bad} mismatches, {seconds:.2f}s")


def _grid_box(rng, cells=1000):
    xs = np.sort(rng.choice(cells + 1, 2, replace=False)) / cells
    ys = np.sort(rng.choice(cells + 1, 2, replace=False)) / cells
    return (xs[0], ys[0], xs[1], ys[1])


def test_criterion_3_geometry_oracles(acceptance_log):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    iou_err = max(abs(iou_corners(a, b) - raster_iou(a, b))
                  for a, b in ((_grid_box(rng), _grid_box(rng)) for _ in range(1000)))
    nms_bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 11))
        boxes = _random_set(rng, n)
        confs = rng.permutation(n) / max(n, 1) + 0.01
        thr = float(rng.uniform(0.05, 0.9))
        dets = [Detection(BoundingBox.from_corners(*b), c, 1.0, c) for b, c in zip(boxes, confs)]
        nms_bad += [d.confidence for d in nms(dets, thr)] != [confs[i] for i in brute_nms(boxes, list(confs), thr)]
    ap_err = ap_grid_err = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 30))
        flags = list(rng.uniform(size=n) < rng.uniform(0.2, 0.9))
        truths = max(1, sum(flags) + int(rng.integers(0, 5)))
        ap = average_precision(flags, truths).average_precision
        ap_err = max(ap_err, abs(ap - float(exact_staircase_ap(flags, truths))))
        if len(flags) < 8:
            ap_grid_err = max(ap_grid_err, abs(ap - staircase_ap(flags, truths)))
    seconds = time.perf_counter() - t0
    ok = iou_err <= 2e-3 and nms_bad == 0 and ap_err <= 1e-9 and ap_grid_err < 1e-4 and seconds < 60
    record(acceptance_log, 3, "IOU / NMS / AP against reference oracles", ok,
           f"IOU max err {iou_err:.1e} (grid-aligned corners), NMS mismatches {nms_bad}/1000, "
           f"AP max err {ap_err:.1e} exact / {ap_grid_err:.1e} numeric grid, {seconds:.1f}s")


def test_criterion_4_loss_point_checks(acceptance_log):
    cfg = DetectorConfig(S=1, B=1, anchors=((0.3, 0.3),))
    box = (0.5, 0.4, 0.3, 0.2)
    perfect = loss_from_decoded(_decoded(dict(cx=0.5, cy=0.4, w=0.3, h=0.2, obj=1.0, cls=1.0)),
                                [_assignment(box, 1.0)], cfg)[0]
    shifted = loss_from_decoded(_decoded(dict(cx=0.6, cy=0.4, w=0.3, h=0.2, obj=1.0, cls=1.0)),
                                [_assignment(box, 1.0)], cfg)[0]
    empty = loss_from_decoded(_decoded(dict(cx=0.5, cy=0.5, w=0.3, h=0.3, obj=0.2, cls=0.9)),
                              [_assignment(None, 0.0)], cfg)[0]
    y = (np.random.default_rng(4).uniform(size=(9, 9)) < 0.3).astype(float)
    bce = seg_loss(np.full(y.shape, 0.5), y)
    m = np.zeros(100, np.uint8)
    m[:20] = 1
    w = compute_mfb([m])
    errs = [abs(perfect - 0.0), abs(shifted - 0.05), abs(empty - 0.02), abs(bce - math.log(2)),
            abs(w.background - 0.625), abs(w.lesion - 2.5)]
    record(acceptance_log, 4, "detector loss, segmentation loss and MFB point checks", max(errs) <= 1e-12,
           f"max abs err {max(errs):.1e}")


def test_criterion_5_detection(acceptance_log, detection_result):
    m = detection_result.metrics
    ok = m["test_ap50"] >= 0.80 and m["test_localization"] >= 0.60 and detection_result.seconds < FIFTEEN_MINUTES
    record(acceptance_log, 5, "synthetic detection AP@0.5 >= 0.80, localization >= 0.60", ok,
           f"AP@0.5 {m['test_ap50']:.3f}, localization {m['test_localization']:.3f}, "
           f"{detection_result.seconds:.0f}s")


def test_criterion_6_segmentation(acceptance_log, segmentation_result):
    m = segmentation_result.metrics
    ok = (m["mfb_dice"] >= 0.85 and m["mfb_accuracy"] >= 0.90
          and m["mfb_sensitivity"] >= m["unweighted_sensitivity"]
          and segmentation_result.seconds < FIFTEEN_MINUTES)
    record(acceptance_log, 6, "synthetic segmentation Dice >= 0.85, accuracy >= 0.90, MFB sensitivity", ok,
           f"Dice {m['mfb_dice']:.3f}, accuracy {m['mfb_accuracy']:.3f}, sensitivity MFB "
           f"{m['mfb_sensitivity']:.3f} vs unweighted {m['unweighted_sensitivity']:.3f}, "
           f"{segmentation_result.seconds:.0f}s")


def test_criterion_7_finetune(acceptance_log, finetune_result):
    m = finetune_result.metrics
    ok = m["ap50_gain"] >= 0.05 and m["backbone_unchanged"]
    record(acceptance_log, 7, "head-only fine-tuning gains >= 0.05 AP@0.5 on the target domain", ok,
           f"source model {m['source_model_target_ap50']:.3f} -> fine-tuned {m['finetuned_target_ap50']:.3f}, "
           f"backbone unchanged {m['backbone_unchanged']}")


def test_criterion_8_pipeline_exactness(acceptance_log):
    rng = np.random.default_rng(8)
    exact = sum(check_round_trip(*round_trip_fixture(rng)) for _ in range(200))
    det, seg = _untrained()
    shapes_ok = 0
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(8, 90, 2))
        img = rng.integers(0, 256, shape + (3,), dtype=np.uint8)
        res = run_pipeline(det, seg, img, PipelineConfig(confidence_floor=0.0))
        shapes_ok += res.merged.shape == shape and all(mk.shape == shape for mk in res.masks)
    record(acceptance_log, 8, "crop/pad/map-back exactness and pipeline extents", exact == 200 and shapes_ok == 20,
           f"{exact}/200 round trips exact, {shapes_ok}/20 pipeline extents match")


def test_criterion_9_determinism(acceptance_log, detection_result, segmentation_result, finetune_result):
    same = []
    for first, runner in ((detection_result, run_detection), (segmentation_result, run_segmentation),
                          (finetune_result, run_finetune)):
        with threadpool_limits(1):
            second = runner()
        same.append(first.report == second.report and first.checkpoints == second.checkpoints)
    record(acceptance_log, 9, "identical configs give byte-identical checkpoints and reports", all(same),
           f"detection {same[0]}, segmentation {same[1]}, fine-tuning {same[2]}")


def test_exact_ap_oracle_sanity():
    assert exact_staircase_ap([True, False, True], 2) == Fraction(5, 6)
