import numpy as np
import pytest
from scipy import ndimage

from melaseg import checkpoint
from melaseg.data import SynthSpec, resize, synthesize
from melaseg.detector import DetectorConfig, build_detector
from melaseg.experiments import TOY_BACKBONE, DetectionExperiment, SegmentationExperiment
from melaseg.pipeline import NO_DETECTIONS, OK, PipelineConfig, overlay, run_pipeline
from melaseg.segmenter import SegConfig, build_segmenter

MARGIN = SegmentationExperiment().margin


def _untrained():
    det = build_detector(DetectorConfig(S=2, B=2, anchors=((0.3, 0.3), (0.6, 0.6)), input_side=16),
                         ((4, 2), (4, 2), (4, 2)), seed=0)
    seg = build_segmenter(SegConfig(height=8, width=8, channels=(2,)), seed=0)
    return det, seg


@pytest.fixture(scope="module")
def trained(detection_result, segmentation_result):
    det = build_detector(DetectionExperiment().detector, TOY_BACKBONE, dtype=np.float32)
    det.load_state_dict(checkpoint.loads(detection_result.checkpoints["detector"]))
    seg = build_segmenter(SegmentationExperiment().seg, dtype=np.float32)
    seg.load_state_dict(checkpoint.loads(segmentation_result.checkpoints["segmenter_mfb"]))
    return det, seg


@pytest.mark.parametrize("shape", [(16, 16), (37, 53), (80, 24)])
def test_output_extents_match_input(shape):
    det, seg = _untrained()
    img = np.random.default_rng(0).integers(0, 256, shape + (3,), dtype=np.uint8)
    res = run_pipeline(det, seg, img, PipelineConfig(confidence_floor=0.0))
    assert res.detections and res.status == OK
    assert res.merged.shape == shape and all(m.shape == shape for m in res.masks)
    merged = np.zeros(shape, np.uint8)
    for m in res.masks:
        merged |= m
    np.testing.assert_array_equal(res.merged, merged)
    assert overlay(img, res).shape == img.shape


def test_floor_above_one_gives_distinct_status():
    det, seg = _untrained()
    res = run_pipeline(det, seg, np.zeros((20, 20, 3), np.uint8), PipelineConfig(confidence_floor=1.1))
    assert res.status == NO_DETECTIONS and res.detections == [] and not res.merged.any()


def test_blank_skin_has_no_detections(trained):
    det, seg = trained
    rng = np.random.default_rng(0)
    skin = np.array([222, 178, 152]) + rng.normal(0, 0.03 * 255, (64, 64, 3))
    img = np.clip(np.rint(skin), 0, 255).astype(np.uint8)
    res = run_pipeline(det, seg, img, PipelineConfig(margin=MARGIN))
    assert res.status == NO_DETECTIONS and not res.merged.any()


def test_two_lesions_give_two_detections(trained):
    det, seg = trained
    spec = SynthSpec(count=1, seed=21, lesions=(2, 2), hair=False, ruler=False, bubbles=False)
    (s,) = synthesize(spec)
    assert len(s.boxes) == 2
    res = run_pipeline(det, seg, s.image, PipelineConfig(margin=MARGIN))
    assert len(res.detections) == 2
    _, count = ndimage.label(res.merged, structure=ndimage.generate_binary_structure(2, 1))
    assert count == 2


def test_larger_source_keeps_extents(trained):
    det, seg = trained
    (s,) = synthesize(SynthSpec(count=1, seed=3))
    big = resize(s.image, (96, 128))
    res = run_pipeline(det, seg, big, PipelineConfig(margin=MARGIN))
    assert res.merged.shape == (96, 128)
    assert res.detections and res.merged.any()
