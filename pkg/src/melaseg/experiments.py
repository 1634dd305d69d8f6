"""Desk-scale synthetic experiments: detection, segmentation (MFB vs
unweighted) and head-only fine-tuning across a domain shift.

Each runner is deterministic for a fixed config and returns the serialized
checkpoints and a plain-text report, so reruns can be compared byte for byte.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import SynthSpec, crop_and_pad, images_to_tensor, map_mask_back, synthesize
from .detector import DetectorConfig, build_detector, finetune_head, train_detector
from .metrics import compute_metrics, count_confusion, detection_ap, localization_fraction, mean_metrics
from .segmenter import SegConfig, build_segmenter, compute_mfb, predict_mask, train_segmenter

TOY_ANCHORS = ((0.15, 0.15), (0.25, 0.25), (0.4, 0.4))
TOY_BACKBONE = ((16, 2), (16, 1), (32, 2), (32, 1), (64, 2), (64, 2))


@dataclass
class ExperimentResult:
    name: str
    metrics: dict
    checkpoints: dict = field(default_factory=dict)   # name -> FYS1 bytes
    report: str = ""
    seconds: float = 0.0

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, blob in self.checkpoints.items():
            (out / f"{name}.fys").write_bytes(blob)
        (out / f"{self.name}_report.txt").write_text(self.report)


def _report(title: str, config: dict, metrics: dict) -> str:
    lines = [f"# {title}"]
    lines += [f"config.{k} = {v}" for k, v in config.items()]
    lines += [f"{k} = {float(v)!r}" if isinstance(v, (float, np.floating)) else f"{k} = {v!r}"
              for k, v in metrics.items()]
    return "\n".join(lines) + "\n"


def _split(samples, train_count: int):
    return samples[:train_count], samples[train_count:]


# ---------------------------------------------------------------- detection

@dataclass
class DetectionExperiment:
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(count=400, side=64, seed=0))
    train_count: int = 300
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(
        S=4, B=3, C=1, anchors=TOY_ANCHORS, input_side=64))
    backbone: tuple = TOY_BACKBONE
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    lr_final_fraction: float = 0.05
    augment: bool = True
    seed: int = 0
    dtype: str = "float32"


def _evaluate_detector(model, samples, floor=None, dtype=np.float32):
    x = images_to_tensor([s.image for s in samples], side=model.cfg.input_side, dtype=dtype)
    dets = []
    for start in range(0, len(x), 50):
        dets += model.predict(x[start:start + 50], floor=floor)
    pairs = [[(d.box, d.confidence) for d in per] for per in dets]
    truth = [s.boxes for s in samples]
    return {
        "ap50": detection_ap(pairs, truth, 0.5).average_precision,
        "localization": localization_fraction(pairs, truth),
    }


def _train_detector(cfg: DetectionExperiment, model, samples, epochs):
    dtype = np.dtype(cfg.dtype).type
    x = images_to_tensor([s.image for s in samples], side=cfg.detector.input_side, dtype=dtype)
    return train_detector(model, x, [s.boxes for s in samples], epochs, cfg.batch_size, cfg.lr, cfg.seed,
                          augment=cfg.augment, lr_final_fraction=cfg.lr_final_fraction)


def run_detection(cfg: DetectionExperiment | None = None) -> ExperimentResult:
    cfg = cfg or DetectionExperiment()
    t0 = time.perf_counter()
    dtype = np.dtype(cfg.dtype).type
    train, test = _split(synthesize(cfg.synth), cfg.train_count)
    model = build_detector(cfg.detector, cfg.backbone, seed=cfg.seed, dtype=dtype)
    history = _train_detector(cfg, model, train, cfg.epochs)
    test_m = _evaluate_detector(model, test, dtype=dtype)
    metrics = {"test_ap50": test_m["ap50"], "test_localization": test_m["localization"],
               "final_loss": history.epoch_loss[-1]}
    blob = checkpoint.dumps(model.state_dict())
    return ExperimentResult("detection", metrics, {"detector": blob},
                            _report("detection", _flat(cfg), metrics), time.perf_counter() - t0)


# ---------------------------------------------------------------- segmentation

@dataclass
class SegmentationExperiment:
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(count=400, side=64, seed=0))
    train_count: int = 300
    seg: SegConfig = field(default_factory=lambda: SegConfig(height=32, width=32, channels=(16, 32),
                                                             epochs=30, batch_size=16, lr=2e-3))
    margin: float = 0.5
    lr_final_fraction: float = 0.05
    seed: int = 0
    dtype: str = "float32"


def crop_patches(samples, seg: SegConfig, margin: float, dtype=np.float32):
    """Image and mask patches around every truth box."""
    target = (seg.height, seg.width)
    imgs, masks = [], []
    for s in samples:
        for box in s.boxes:
            img, _ = crop_and_pad(s.image, box, margin, target)
            m, _ = crop_and_pad(s.mask, box, margin, target, mode="nearest")
            imgs.append(img)
            masks.append(m)
    return images_to_tensor(imgs, dtype=dtype), np.stack(masks).astype(dtype)


def segment_image(model, sample, margin: float, boxes=None) -> np.ndarray:
    """Source-resolution binary mask: union of the segmented crops around ``boxes`` (default: truth)."""
    h, w = sample.mask.shape
    target = (model.cfg.height, model.cfg.width)
    dtype = model.parameters()[0].weight.dtype
    merged = np.zeros((h, w), dtype=np.uint8)
    for box in sample.boxes if boxes is None else boxes:
        patch, rec = crop_and_pad(sample.image, box, margin, target)
        _, binary = predict_mask(model, images_to_tensor([patch], dtype=dtype)[0])
        merged |= map_mask_back(binary, rec)
    return merged


def _evaluate_segmenter(model, samples, margin):
    reports = [compute_metrics(count_confusion(segment_image(model, s, margin), s.mask)) for s in samples]
    mean, _ = mean_metrics(reports)
    return {k: getattr(mean, k) for k in mean.NAMES}


def run_segmentation(cfg: SegmentationExperiment | None = None) -> ExperimentResult:
    """Trains the same segmenter twice from one seed: MFB-weighted and unweighted."""
    cfg = cfg or SegmentationExperiment()
    t0 = time.perf_counter()
    dtype = np.dtype(cfg.dtype).type
    train, test = _split(synthesize(cfg.synth), cfg.train_count)
    x, y = crop_patches(train, cfg.seg, cfg.margin, dtype)
    weights = compute_mfb(list(y))
    metrics = {"train_patches": len(x), "mfb_background": weights.background, "mfb_lesion": weights.lesion}
    blobs = {}
    for tag, w in (("mfb", weights), ("unweighted", None)):
        model = build_segmenter(cfg.seg, seed=cfg.seed, dtype=dtype)
        history = train_segmenter(model, x, y, w, cfg.seg.epochs, cfg.seg.batch_size, cfg.seg.lr, cfg.seed,
                                  lr_final_fraction=cfg.lr_final_fraction)
        for k, v in _evaluate_segmenter(model, test, cfg.margin).items():
            metrics[f"{tag}_{k}"] = v
        metrics[f"{tag}_final_loss"] = history.epoch_loss[-1]
        blobs[f"segmenter_{tag}"] = checkpoint.dumps(model.state_dict())
    return ExperimentResult("segmentation", metrics, blobs,
                            _report("segmentation", _flat(cfg), metrics), time.perf_counter() - t0)


# ---------------------------------------------------------------- fine-tuning

def source_domain(seed: int = 1, count: int = 400) -> SynthSpec:
    """Round lesions."""
    return SynthSpec(count=count, side=64, seed=seed, irregularity=0.0, aspect=(1.0, 1.0))


def target_domain(seed: int = 2, count: int = 400) -> SynthSpec:
    """Elongated, strongly lobed lesions."""
    return SynthSpec(count=count, side=64, seed=seed, irregularity=0.45, lobes=(2, 4),
                     aspect=(0.35, 0.6), radius=(0.14, 0.24))


@dataclass
class FinetuneExperiment:
    source: SynthSpec = field(default_factory=source_domain)
    target: SynthSpec = field(default_factory=target_domain)
    train_count: int = 300
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(
        S=4, B=3, C=1, anchors=TOY_ANCHORS, input_side=64))
    backbone: tuple = TOY_BACKBONE
    source_epochs: int = 100
    finetune_epochs: int = 80
    batch_size: int = 16
    lr: float = 1e-3
    lr_final_fraction: float = 0.05
    augment: bool = True
    seed: int = 0
    dtype: str = "float32"


def run_finetune(cfg: FinetuneExperiment | None = None) -> ExperimentResult:
    cfg = cfg or FinetuneExperiment()
    t0 = time.perf_counter()
    dtype = np.dtype(cfg.dtype).type
    src_train, _ = _split(synthesize(cfg.source), cfg.train_count)
    tgt_train, tgt_test = _split(synthesize(cfg.target), cfg.train_count)

    source = build_detector(cfg.detector, cfg.backbone, seed=cfg.seed, dtype=dtype)
    _train_detector(cfg, source, src_train, cfg.source_epochs)
    src_state = source.state_dict()
    before = _evaluate_detector(source, tgt_test, dtype=dtype)

    tuned = build_detector(cfg.detector, cfg.backbone, seed=cfg.seed, dtype=dtype)
    finetune_head(tuned, src_state, freeze=True, seed=cfg.seed)
    frozen = {k: v.copy() for k, v in tuned.state_dict().items() if not k.startswith("head.")}
    _train_detector(cfg, tuned, tgt_train, cfg.finetune_epochs)
    after = _evaluate_detector(tuned, tgt_test, dtype=dtype)
    backbone_unchanged = all(np.array_equal(v, tuned.state_dict()[k]) for k, v in frozen.items())

    metrics = {"source_model_target_ap50": before["ap50"], "finetuned_target_ap50": after["ap50"],
               "ap50_gain": after["ap50"] - before["ap50"],
               "source_model_target_localization": before["localization"],
               "finetuned_target_localization": after["localization"],
               "backbone_unchanged": backbone_unchanged}
    blobs = {"source_detector": checkpoint.dumps(src_state),
             "finetuned_detector": checkpoint.dumps(tuned.state_dict())}
    return ExperimentResult("finetune", metrics, blobs,
                            _report("finetune", _flat(cfg), metrics), time.perf_counter() - t0)


def _flat(cfg) -> dict:
    out = {}
    for k, v in asdict(cfg).items():
        if isinstance(v, dict):
            out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            out[k] = v
    return out


def quick(cfg, **changes):
    """``dataclasses.replace`` shorthand used by the scripts for smoke runs."""
    return replace(cfg, **changes)
