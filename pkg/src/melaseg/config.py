"""``key = value`` run configuration: built-in defaults < config file < flags."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .data import SynthSpec
from .detector import DEFAULT_ANCHORS, DEFAULT_BACKBONE, DetectorConfig
from .segmenter import SegConfig

WORKSPACE_ENV = "MELASEG_WORKSPACE"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _pairs(cast) -> Callable[[str], tuple]:
    """``"a/b, c/d"`` -> ``((a, b), (c, d))``."""
    def parse(text: str) -> tuple:
        out = []
        for item in text.replace(" ", "").split(","):
            if not item:
                continue
            left, right = item.split("/")
            out.append((cast(left), cast(right)))
        return tuple(out)
    return parse


def _fmt_pairs(pairs) -> str:
    return ",".join(f"{a:g}/{b:g}" for a, b in pairs)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: str
    help: str


KEYS = [
    Key("workspace", str, "", f"workspace root (default ${WORKSPACE_ENV} or ./workspace)"),
    Key("seed", int, "0", "global seed for initialization and shuffling"),
    Key("dtype", str, "float32", "training precision: float32 or float64"),
    Key("workers", int, "1", "worker threads for per-image inference"),
    Key("data", str, "", "dataset directory (default <workspace>/data)"),
    # synthetic data
    Key("synth.count", int, "400", "number of generated samples"),
    Key("synth.side", int, "64", "image side in pixels"),
    Key("synth.lesions", _ints, "1,2", "min,max lesions per image"),
    Key("synth.radius", _floats, "0.09,0.2", "min,max semi-axis as a fraction of the side"),
    Key("synth.aspect", _floats, "0.7,1.0", "min,max minor/major axis ratio"),
    Key("synth.irregularity", float, "0.15", "border amplitude a in r0*(1+a*sin(k*theta+phi))"),
    Key("synth.lobes", _ints, "3,7", "min,max lobe count k"),
    Key("synth.hair", _bool, "true", "draw hair strokes"),
    Key("synth.frame", _bool, "true", "draw a black circular frame"),
    Key("synth.ruler", _bool, "true", "draw ruler ticks"),
    Key("synth.bubbles", _bool, "true", "draw bright bubbles"),
    Key("synth.noise", float, "0.03", "pixel noise sigma as a fraction of 255"),
    Key("synth.train_ratio", float, "0.7", "fraction assigned to the training split"),
    # detector
    Key("det.S", int, "4", "grid side"),
    Key("det.B", int, "3", "boxes per cell"),
    Key("det.C", int, "1", "class count"),
    Key("det.anchors", _pairs(float), "0.15/0.15,0.25/0.25,0.4/0.4", "anchor extents w/h, comma separated"),
    Key("det.backbone", _pairs(int), "16/2,16/1,32/2,32/1,64/2,64/2", "backbone stages channels/stride"),
    Key("det.lambda_coord", float, "5", "coordinate loss weight"),
    Key("det.lambda_noobj", float, "0.5", "no-object confidence loss weight"),
    Key("det.input_side", int, "64", "detector input side in pixels"),
    Key("det.nms_iou", float, "0.2", "NMS suppression IOU threshold"),
    Key("det.confidence_floor", float, "0.25", "minimum confidence kept at inference"),
    Key("det.assign_by", str, "anchor", "responsible predictor selection: anchor or prediction"),
    Key("det.epochs", int, "200", "training epochs"),
    Key("det.batch_size", int, "32", "mini-batch size"),
    Key("det.lr", float, "1e-3", "Adam learning rate"),
    Key("det.momentum", float, "0.9", "Adam beta1"),
    Key("det.lr_final_fraction", float, "1.0", "cosine-anneal the learning rate to this fraction"),
    Key("det.augment", _bool, "true", "random flips and transposes during training"),
    Key("det.checkpoint_every", int, "50", "write an epoch checkpoint every N epochs (0: final only)"),
    # segmenter
    Key("seg.height", int, "96", "patch height"),
    Key("seg.width", int, "128", "patch width"),
    Key("seg.channels", _ints, "16,32,64", "encoder stage channels"),
    Key("seg.epochs", int, "200", "training epochs"),
    Key("seg.batch_size", int, "32", "mini-batch size"),
    Key("seg.lr", float, "0.001", "Adam learning rate"),
    Key("seg.lr_final_fraction", float, "1.0", "cosine-anneal the learning rate to this fraction"),
    Key("seg.mfb", _bool, "true", "median-frequency-balanced loss weights"),
    Key("seg.threshold", float, "0.5", "probability binarization threshold"),
    Key("seg.margin", float, "0.1", "crop margin per side as a fraction of the box size"),
    # fine-tuning
    Key("finetune.source", str, "", "source detector checkpoint"),
    Key("finetune.freeze", _bool, "true", "freeze all non-head layers"),
    Key("finetune.epochs", int, "80", "fine-tuning epochs"),
    # inference / evaluation
    Key("infer.input", str, "", "image directory (default <data>/images)"),
    Key("infer.output", str, "", "output directory (default <workspace>/infer)"),
    Key("infer.split", str, "validation", "manifest split for infer and eval: train, validation or all"),
    Key("eval.pred", str, "", "prediction directory (default <workspace>/infer)"),
    Key("eval.truth", str, "", "truth directory (default <data>)"),
    Key("eval.ap_iou", _floats, "0.5,0.8", "IOU thresholds for AP"),
    Key("eval.report", str, "", "CSV report path (default <workspace>/reports/eval.csv)"),
    Key("gradcheck.seeds", int, "20", "random seeds per gradient check"),
]
KEY_MAP = {k.name: k for k in KEYS}


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_MAP:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


class RunConfig:
    """Resolved key/value view with typed access."""

    def __init__(self, file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None):
        self.raw = {k.name: k.default for k in KEYS}
        for source in (file_values or {}, overrides or {}):
            for key, value in source.items():
                if key not in KEY_MAP:
                    raise ConfigError(f"unknown key {key!r}")
                self.raw[key] = value
        self.values = {}
        for key, text in self.raw.items():
            try:
                self.values[key] = KEY_MAP[key].parse(text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
        if self.values["dtype"] not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not self.raw["workspace"]:
            self.raw["workspace"] = os.environ.get(WORKSPACE_ENV, "workspace")
            self.values["workspace"] = self.raw["workspace"]

    def __getitem__(self, key):
        return self.values[key]

    def lines(self) -> list[str]:
        return [f"{k} = {self.raw[k]}" for k in KEY_MAP]

    # -- paths
    @property
    def workspace(self) -> Path:
        return Path(self["workspace"])

    def path(self, key: str, default: Path) -> Path:
        return Path(self[key]) if self[key] else default

    @property
    def data_dir(self) -> Path:
        return self.path("data", self.workspace / "data")

    @property
    def checkpoint_dir(self) -> Path:
        return self.workspace / "checkpoints"

    # -- typed sections
    def detector_config(self) -> DetectorConfig:
        v = self.values
        try:
            return DetectorConfig(S=v["det.S"], B=v["det.B"], C=v["det.C"], anchors=v["det.anchors"],
                                  lambda_coord=v["det.lambda_coord"], lambda_noobj=v["det.lambda_noobj"],
                                  input_side=v["det.input_side"], nms_iou_threshold=v["det.nms_iou"],
                                  confidence_floor=v["det.confidence_floor"], assign_by=v["det.assign_by"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def seg_config(self) -> SegConfig:
        v = self.values
        try:
            return SegConfig(height=v["seg.height"], width=v["seg.width"], channels=v["seg.channels"],
                             epochs=v["seg.epochs"], batch_size=v["seg.batch_size"], lr=v["seg.lr"],
                             threshold=v["seg.threshold"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def synth_spec(self) -> SynthSpec:
        v = self.values
        try:
            return SynthSpec(count=v["synth.count"], side=v["synth.side"], lesions=v["synth.lesions"],
                             radius=v["synth.radius"], aspect=v["synth.aspect"],
                             irregularity=v["synth.irregularity"], lobes=v["synth.lobes"],
                             hair=v["synth.hair"], frame=v["synth.frame"], ruler=v["synth.ruler"],
                             bubbles=v["synth.bubbles"], noise=v["synth.noise"], seed=v["seed"],
                             train_ratio=v["synth.train_ratio"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


DEFAULTS_DOC = {
    "anchors": _fmt_pairs(DEFAULT_ANCHORS),
    "backbone": _fmt_pairs(DEFAULT_BACKBONE),
}
