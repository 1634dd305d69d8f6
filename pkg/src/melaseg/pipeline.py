"""Two-phase inference: detect lesions, crop each one, segment the crop and
map the result back onto the source image."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import crop_and_pad, images_to_tensor, map_mask_back, resize
from .detector import Detection, Detector
from .segmenter import Segmenter, predict_mask

OK = "ok"
NO_DETECTIONS = "no-detections"


@dataclass
class PipelineConfig:
    margin: float = 0.1
    confidence_floor: float | None = None   # None -> detector config value


@dataclass
class PipelineResult:
    detections: list
    masks: list                  # per detection, source resolution, uint8 {0,1}
    merged: np.ndarray
    status: str = OK
    records: list = field(default_factory=list)


def _to_model_input(raster: np.ndarray, dtype) -> np.ndarray:
    return images_to_tensor([raster], dtype=dtype)[0]


def run_pipeline(detector: Detector, segmenter: Segmenter, image: np.ndarray,
                 cfg: PipelineConfig | None = None) -> PipelineResult:
    """``image`` is an (H, W, 3) uint8 raster; all outputs share its extents."""
    cfg = cfg or PipelineConfig()
    h, w = image.shape[:2]
    dcfg = detector.cfg
    dtype = detector.head.params.weight.dtype
    x = images_to_tensor([image], side=dcfg.input_side, dtype=dtype)
    floor = dcfg.confidence_floor if cfg.confidence_floor is None else cfg.confidence_floor
    dets: list[Detection] = detector.predict(x, floor=floor)[0]
    merged = np.zeros((h, w), dtype=np.uint8)
    masks, records, kept = [], [], []
    sdtype = segmenter.parameters()[0].weight.dtype
    target = (segmenter.cfg.height, segmenter.cfg.width)
    for det in dets:
        box = det.box.clamped()
        if box.w <= 0 or box.h <= 0:
            continue
        try:
            patch, rec = crop_and_pad(image, box, cfg.margin, target)
        except ValueError:
            continue
        _, binary = predict_mask(segmenter, _to_model_input(patch, sdtype))
        full = map_mask_back(binary, rec, (h, w))
        masks.append(full)
        records.append(rec)
        kept.append(det)
        merged |= full
    return PipelineResult(kept, masks, merged, OK if kept else NO_DETECTIONS, records)


def overlay(image: np.ndarray, result: PipelineResult) -> np.ndarray:
    """RGB copy of ``image`` with detection boxes in red and the merged mask outline in green."""
    out = image.copy()
    h, w = out.shape[:2]
    m = result.merged.astype(bool)
    edge = m & ~ndimage.binary_erosion(m)
    out[edge] = (0, 255, 0)
    for det in result.detections:
        x1, y1, x2, y2 = det.box.clamped().to_pixels(w, h)
        x1, y1 = int(np.clip(np.floor(x1), 0, w - 1)), int(np.clip(np.floor(y1), 0, h - 1))
        x2, y2 = int(np.clip(np.ceil(x2) - 1, 0, w - 1)), int(np.clip(np.ceil(y2) - 1, 0, h - 1))
        out[y1, x1:x2 + 1] = out[y2, x1:x2 + 1] = (255, 0, 0)
        out[y1:y2 + 1, x1] = out[y1:y2 + 1, x2] = (255, 0, 0)
    return out


def resize_for_detector(image: np.ndarray, side: int) -> np.ndarray:
    return resize(image, side)
