"""Single-class grid detector: backbone, 1x1 detection head, box decoding,
sum-of-squares training loss with responsible-predictor assignment, NMS.

Head channel layout: for box ``j`` the slice ``j*(5+C) : (j+1)*(5+C)`` holds
``t_x, t_y, t_w, t_h, t_o`` followed by ``C`` class logits.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import AdamState, cosine_lr, Conv2d, Network, ShapeError, adam_step, sigmoid

log = logging.getLogger(__name__)

DEFAULT_ANCHORS = ((0.1, 0.1), (0.3, 0.3), (0.6, 0.6))


# ---------------------------------------------------------------- boxes

@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, normalized center form."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def clamped(self) -> "BoundingBox":
        x1, y1, x2, y2 = self.corners()
        x1, y1 = min(max(x1, 0.0), 1.0), min(max(y1, 0.0), 1.0)
        x2, y2 = min(max(x2, 0.0), 1.0), min(max(y2, 0.0), 1.0)
        return BoundingBox.from_corners(x1, y1, x2, y2)

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = self.corners()
        return x1 * width, y1 * height, x2 * width, y2 * height


def iou_corners(a, b) -> float:
    """IOU of two ``(x1, y1, x2, y2)`` tuples.  Zero-area boxes score 0."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return iou_corners(a.corners(), b.corners())


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU of corner arrays ``a`` (n,4) and ``b`` (m,4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where((inter > 0) & (union > 0), inter / np.where(union > 0, union, 1.0), 0.0)
    return out


# ---------------------------------------------------------------- config

@dataclass
class DetectorConfig:
    S: int = 4
    B: int = 3
    C: int = 1
    anchors: tuple = DEFAULT_ANCHORS
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    input_side: int = 416
    nms_iou_threshold: float = 0.2
    confidence_floor: float = 0.25
    assign_by: str = "anchor"

    def __post_init__(self):
        self.anchors = tuple(tuple(float(v) for v in a) for a in self.anchors)
        if len(self.anchors) != self.B:
            raise ValueError(f"B={self.B} but {len(self.anchors)} anchors given")
        if self.lambda_coord <= 0 or self.lambda_noobj < 0:
            raise ValueError("lambda_coord must be > 0 and lambda_noobj >= 0")
        if not 0 < self.nms_iou_threshold < 1:
            raise ValueError("nms_iou_threshold must lie in (0, 1)")
        if self.assign_by not in ("anchor", "prediction"):
            raise ValueError(f"assign_by must be 'anchor' or 'prediction', got {self.assign_by!r}")

    @property
    def head_channels(self) -> int:
        return self.B * (5 + self.C)


@dataclass
class Detection:
    box: BoundingBox
    objectness: float
    class_score: float
    confidence: float
    class_index: int = 0


def confidence_score(objectness_prob: float, iou_with_truth: float) -> float:
    return objectness_prob * iou_with_truth


# ---------------------------------------------------------------- decoding

def _split_raw(raw: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    if raw.ndim != 4 or raw.shape[1] != cfg.head_channels or raw.shape[2] != raw.shape[3]:
        raise ShapeError(f"head output {raw.shape} does not match B*(5+C)={cfg.head_channels} channels")
    n, _, s, _ = raw.shape
    # (N, S_row, S_col, B, 5+C)
    return raw.reshape(n, cfg.B, 5 + cfg.C, s, s).transpose(0, 3, 4, 1, 2)


@dataclass
class Decoded:
    """Decoded head tensors, each shaped (N, S, S, B[, C])."""

    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray
    obj: np.ndarray
    cls: np.ndarray
    sx: np.ndarray = None
    sy: np.ndarray = None

    def corners(self) -> np.ndarray:
        return np.stack([self.cx - self.w / 2, self.cy - self.h / 2,
                         self.cx + self.w / 2, self.cy + self.h / 2], axis=-1)


def decode_arrays(raw: np.ndarray, cfg: DetectorConfig) -> Decoded:
    t = _split_raw(raw, cfg)
    s = t.shape[1]
    anchors = np.asarray(cfg.anchors, dtype=raw.dtype)
    rows = np.arange(s, dtype=raw.dtype)[None, :, None, None]
    cols = np.arange(s, dtype=raw.dtype)[None, None, :, None]
    sx = sigmoid(t[..., 0])
    sy = sigmoid(t[..., 1])
    return Decoded(
        cx=(cols + sx) / s,
        cy=(rows + sy) / s,
        w=anchors[:, 0] * np.exp(t[..., 2]),
        h=anchors[:, 1] * np.exp(t[..., 3]),
        obj=sigmoid(t[..., 4]),
        cls=sigmoid(t[..., 5:]),
        sx=sx, sy=sy,
    )


def decode_head(raw: np.ndarray, cfg: DetectorConfig, floor: float = 0.0) -> list[list[Detection]]:
    """Per-image detections for every (cell, box) whose confidence reaches ``floor``."""
    d = decode_arrays(raw, cfg)
    out = []
    for n in range(raw.shape[0]):
        dets = []
        cls_idx = d.cls[n].argmax(axis=-1)
        cls_score = np.take_along_axis(d.cls[n], cls_idx[..., None], axis=-1)[..., 0]
        conf = d.obj[n] * cls_score
        for r, c, j in zip(*np.nonzero(conf >= floor)):
            box = BoundingBox(float(d.cx[n, r, c, j]), float(d.cy[n, r, c, j]),
                              float(d.w[n, r, c, j]), float(d.h[n, r, c, j]))
            dets.append(Detection(box, float(d.obj[n, r, c, j]), float(cls_score[r, c, j]),
                                  float(conf[r, c, j]), int(cls_idx[r, c, j])))
        out.append(dets)
    return out


# ---------------------------------------------------------------- targets

@dataclass
class TargetAssignment:
    has_object: np.ndarray            # (S, S) bool
    responsible: np.ndarray           # (S, S, B) bool
    boxes: np.ndarray                 # (S, S, B, 4) cx, cy, w, h
    classes: np.ndarray               # (S, S, C) one-hot
    conf_target: np.ndarray           # (S, S, B)
    dropped: int = 0


def cell_of(box: BoundingBox, S: int) -> tuple[int, int]:
    """``(row, col)`` of the cell holding the box center, clamped to S-1."""
    col = min(max(int(math.floor(box.cx * S)), 0), S - 1)
    row = min(max(int(math.floor(box.cy * S)), 0), S - 1)
    return row, col


def assign_targets(truth_boxes: Sequence[BoundingBox], predictions: Decoded | None,
                   cfg: DetectorConfig, index: int = 0,
                   truth_classes: Sequence[int] | None = None) -> TargetAssignment:
    """Build the indicator structure of the loss for image ``index`` of ``predictions``.

    The responsible predictor is the box slot with the highest IOU against the
    truth (anchor extents centered on the truth when ``cfg.assign_by`` is
    ``"anchor"``, the decoded prediction otherwise); ties go to the lowest slot.
    Its confidence target is the IOU between the decoded box and the truth, or 1
    when no predictions are supplied.
    """
    S, B, C = cfg.S, cfg.B, cfg.C
    a = TargetAssignment(np.zeros((S, S), bool), np.zeros((S, S, B), bool),
                         np.zeros((S, S, B, 4)), np.zeros((S, S, C)), np.zeros((S, S, B)))
    truth_classes = list(truth_classes) if truth_classes is not None else [0] * len(truth_boxes)
    owner: dict[tuple[int, int], int] = {}
    for k, box in enumerate(truth_boxes):
        cell = cell_of(box, S)
        if cell in owner:
            other = truth_boxes[owner[cell]]
            a.dropped += 1
            log.warning("two truth centers share cell %s; keeping the larger box", cell)
            if box.area <= other.area:
                continue
        owner[cell] = k
    for (r, c), k in sorted(owner.items()):
        box = truth_boxes[k]
        truth_c = box.corners()
        if cfg.assign_by == "anchor" or predictions is None:
            scores = [iou_corners(truth_c, BoundingBox(box.cx, box.cy, pw, ph).corners())
                      for pw, ph in cfg.anchors]
        else:
            scores = [iou_corners(truth_c, (predictions.cx[index, r, c, j] - predictions.w[index, r, c, j] / 2,
                                            predictions.cy[index, r, c, j] - predictions.h[index, r, c, j] / 2,
                                            predictions.cx[index, r, c, j] + predictions.w[index, r, c, j] / 2,
                                            predictions.cy[index, r, c, j] + predictions.h[index, r, c, j] / 2))
                      for j in range(B)]
        j = int(np.argmax(scores))
        a.has_object[r, c] = True
        a.responsible[r, c, j] = True
        a.boxes[r, c, j] = (box.cx, box.cy, box.w, box.h)
        a.classes[r, c, truth_classes[k]] = 1.0
        if predictions is None:
            a.conf_target[r, c, j] = 1.0
        else:
            pc = (predictions.cx[index, r, c, j], predictions.cy[index, r, c, j],
                  predictions.w[index, r, c, j], predictions.h[index, r, c, j])
            a.conf_target[r, c, j] = iou(BoundingBox(*map(float, pc)), box)
    return a


# ---------------------------------------------------------------- loss

@dataclass
class LossParts:
    localization: float
    confidence_obj: float
    confidence_noobj: float
    classification: float

    @property
    def total(self) -> float:
        return self.localization + self.confidence_obj + self.confidence_noobj + self.classification


def _stack_assignments(assignments: Sequence[TargetAssignment]):
    return (np.stack([a.responsible for a in assignments]).astype(float),
            np.stack([a.boxes for a in assignments]),
            np.stack([a.classes for a in assignments]),
            np.stack([a.conf_target for a in assignments]))


def loss_from_decoded(d: Decoded, assignments: Sequence[TargetAssignment], cfg: DetectorConfig):
    """Sum-of-squares loss on decoded values, averaged over the batch.

    Returns ``(total, parts, grads)`` where ``grads`` maps ``cx, cy, w, h, obj, cls``
    to the derivative of the total with respect to that decoded tensor.
    """
    n = d.cx.shape[0]
    resp, tbox, tcls, tconf = _stack_assignments(assignments)
    lc, ln = cfg.lambda_coord, cfg.lambda_noobj
    ex = d.cx - tbox[..., 0]
    ey = d.cy - tbox[..., 1]
    sw, sh = np.sqrt(d.w), np.sqrt(d.h)
    ew = sw - np.sqrt(tbox[..., 2])
    eh = sh - np.sqrt(tbox[..., 3])
    eo = d.obj - tconf
    loc = lc * np.sum(resp * (ex ** 2 + ey ** 2)) + lc * np.sum(resp * (ew ** 2 + eh ** 2))
    cobj = np.sum(resp * eo ** 2)
    noresp = 1.0 - resp
    cnoobj = ln * np.sum(noresp * d.obj ** 2)
    # class term: one per object cell, read from its responsible predictor
    ec = d.cls - tcls[:, :, :, None, :]
    ccls = np.sum(resp[..., None] * ec ** 2)
    parts = LossParts(loc / n, cobj / n, cnoobj / n, ccls / n)
    grads = {
        "cx": 2 * lc * resp * ex / n,
        "cy": 2 * lc * resp * ey / n,
        # d/dw (sqrt w - sqrt t)^2 = (sqrt w - sqrt t) / sqrt w
        "w": lc * resp * ew / sw / n,
        "h": lc * resp * eh / sh / n,
        "obj": (2 * resp * eo + 2 * ln * noresp * d.obj) / n,
        "cls": 2 * resp[..., None] * ec / n,
    }
    return parts.total, parts, grads


def yolo_loss(raw: np.ndarray, assignments: Sequence[TargetAssignment], cfg: DetectorConfig):
    """Loss and its gradient with respect to the raw head output."""
    d = decode_arrays(raw, cfg)
    total, parts, g = loss_from_decoded(d, assignments, cfg)
    s = raw.shape[2]
    dt = np.zeros(raw.shape[:1] + (s, s, cfg.B, 5 + cfg.C), dtype=raw.dtype)
    dt[..., 0] = g["cx"] * d.sx * (1 - d.sx) / s
    dt[..., 1] = g["cy"] * d.sy * (1 - d.sy) / s
    dt[..., 2] = g["w"] * d.w
    dt[..., 3] = g["h"] * d.h
    dt[..., 4] = g["obj"] * d.obj * (1 - d.obj)
    dt[..., 5:] = g["cls"] * d.cls * (1 - d.cls)
    n = raw.shape[0]
    draw = dt.transpose(0, 3, 4, 1, 2).reshape(n, cfg.head_channels, s, s)
    return total, parts, draw


# ---------------------------------------------------------------- NMS

def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression; output is in descending-confidence order."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    kept: list[Detection] = []
    kept_corners = []
    for i in order:
        c = detections[i].box.corners()
        if all(iou_corners(c, k) < iou_threshold for k in kept_corners):
            kept.append(detections[i])
            kept_corners.append(c)
    return kept


# ---------------------------------------------------------------- model

DEFAULT_BACKBONE = ((8, 1), (16, 2), (16, 1), (32, 2), (32, 1), (64, 2), (64, 2))


class Detector(Network):
    """Convolutional backbone (3x3 conv + leaky ReLU per stage) and a linear 1x1 head."""

    def __init__(self, cfg: DetectorConfig, backbone_spec=DEFAULT_BACKBONE, in_channels=3,
                 seed: int = 0, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.backbone_spec = tuple(tuple(s) for s in backbone_spec)
        stride = math.prod(s for _, s in self.backbone_spec)
        if cfg.input_side % stride or cfg.input_side // stride != cfg.S:
            raise ShapeError(f"backbone stride {stride} maps input side {cfg.input_side} to "
                             f"{cfg.input_side / stride:g}, not S={cfg.S}")
        rng = np.random.default_rng(seed)
        cin = in_channels
        for i, (ch, st) in enumerate(self.backbone_spec):
            self.add(f"backbone.{i}", Conv2d(cin, ch, 3, stride=st, pad=1, rng=rng, dtype=dtype))
            cin = ch
        self.layers[0][1].input_grad = False
        self.feature_channels = cin
        self.add("head", Conv2d(cin, cfg.head_channels, 1, act=False, rng=rng, dtype=dtype))

    @property
    def head(self) -> Conv2d:
        return self.layers[-1][1]

    def freeze_backbone(self, frozen: bool = True):
        for name, layer in self.layers:
            if name != "head":
                layer.params.frozen = frozen

    def predict(self, images: np.ndarray, floor: float | None = None, apply_nms: bool = True):
        cfg = self.cfg
        raw = self.forward(images)
        dets = decode_head(raw, cfg, cfg.confidence_floor if floor is None else floor)
        if apply_nms:
            dets = [nms(d, cfg.nms_iou_threshold) for d in dets]
        return dets


def build_detector(cfg: DetectorConfig, backbone_spec=DEFAULT_BACKBONE, seed: int = 0,
                   dtype=np.float64) -> Detector:
    return Detector(cfg, backbone_spec, seed=seed, dtype=dtype)


def finetune_head(model: Detector, checkpoint: dict[str, np.ndarray], freeze: bool = True,
                  seed: int = 0) -> Detector:
    """Load every non-head tensor from ``checkpoint``, re-initialize the head.

    The head is rebuilt for ``model.cfg`` so a source checkpoint with a
    different class count is accepted.  Non-head shape mismatches raise.
    """
    model.load_state_dict(checkpoint, skip=("head",))
    rng = np.random.default_rng(seed)
    dtype = model.head.params.weight.dtype
    model.layers[-1] = ("head", Conv2d(model.feature_channels, model.cfg.head_channels, 1,
                                       act=False, rng=rng, dtype=dtype))
    model.freeze_backbone(freeze)
    return model


# ---------------------------------------------------------------- training

@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    parts: list = field(default_factory=list)


def dihedral(image: np.ndarray, boxes: Sequence[BoundingBox], k: int):
    """Apply element ``k`` (0..7) of the square's symmetry group to a (C,H,W)
    image and its normalized boxes: optional transpose, then optional
    horizontal and vertical flips."""
    out = list(boxes)
    if k & 4:
        image = image.transpose(0, 2, 1)
        out = [BoundingBox(b.cy, b.cx, b.h, b.w) for b in out]
    if k & 1:
        image = image[:, :, ::-1]
        out = [BoundingBox(1 - b.cx, b.cy, b.w, b.h) for b in out]
    if k & 2:
        image = image[:, ::-1, :]
        out = [BoundingBox(b.cx, 1 - b.cy, b.w, b.h) for b in out]
    return image, out


def train_detector(model: Detector, images: np.ndarray, boxes: Sequence[Sequence[BoundingBox]],
                   epochs: int, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                   state: AdamState | None = None, augment: bool = False,
                   lr_final_fraction: float = 1.0, on_epoch=None) -> TrainLog:
    """Adam over shuffled mini-batches; deterministic for a fixed seed.

    ``augment`` draws one of the eight flip/transpose symmetries per sample and
    step; it requires square inputs.
    """
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    state = state or AdamState(lr=lr)
    params = model.parameters()
    history = TrainLog()
    n = len(images)
    for epoch in range(epochs):
        state.lr = cosine_lr(lr, epoch, epochs, lr_final_fraction)
        order = rng.permutation(n)
        total = 0.0
        sums = np.zeros(4)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if augment:
                pairs = [dihedral(images[i], boxes[i], int(t)) for i, t in zip(idx, rng.integers(0, 8, len(idx)))]
                x = np.ascontiguousarray(np.stack([p[0] for p in pairs]))
                batch_boxes = [p[1] for p in pairs]
            else:
                x = images[idx]
                batch_boxes = [boxes[i] for i in idx]
            model.zero_grad()
            raw = model.forward(x)
            d = decode_arrays(raw, cfg)
            assigns = [assign_targets(bb, d, cfg, index=k) for k, bb in enumerate(batch_boxes)]
            loss, parts, draw = yolo_loss(raw, assigns, cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite detector loss at epoch {epoch}")
            model.backward(draw)
            adam_step(params, state)
            total += loss * len(idx)
            sums += np.array([parts.localization, parts.confidence_obj,
                              parts.confidence_noobj, parts.classification]) * len(idx)
        history.epoch_loss.append(total / n)
        history.parts.append((sums / n).tolist())
        if on_epoch:
            on_epoch(epoch, history)
    return history


# ---------------------------------------------------------------- label files

def format_labels(boxes: Sequence[BoundingBox], classes: Sequence[int] | None = None,
                  confidences: Sequence[float] | None = None) -> str:
    classes = classes if classes is not None else [0] * len(boxes)
    lines = []
    for k, b in enumerate(boxes):
        line = f"{classes[k]} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"
        if confidences is not None:
            line += f" {confidences[k]:.6f}"
        lines.append(line)
    return "".join(line + "\n" for line in lines)


def write_labels(path, boxes, classes=None, confidences=None) -> None:
    Path(path).write_text(format_labels(boxes, classes, confidences))


def read_labels(path):
    """Return ``(boxes, classes, confidences)``; confidence is ``None`` for plain labels."""
    boxes, classes, confs = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (5, 6):
            raise ValueError(f"{path}:{lineno}: expected 5 or 6 fields, got {len(fields)}")
        classes.append(int(fields[0]))
        boxes.append(BoundingBox(*map(float, fields[1:5])))
        confs.append(float(fields[5]) if len(fields) == 6 else None)
    return boxes, classes, confs


def kmeans_anchors(boxes: Sequence[BoundingBox], k: int = 3, iters: int = 50, seed: int = 0):
    """Cluster truth extents with ``1 - IOU`` distance; returns ``k`` (w, h) pairs sorted by area."""
    wh = np.array([(b.w, b.h) for b in boxes], dtype=float)
    if len(wh) < k:
        raise ValueError(f"need at least {k} boxes, got {len(wh)}")
    def overlap(centers):
        inter = np.minimum(wh[:, None, 0], centers[None, :, 0]) * np.minimum(wh[:, None, 1], centers[None, :, 1])
        return inter / (wh[:, None].prod(-1) + centers[None].prod(-1) - inter)

    # farthest-point seeding under the 1 - IOU distance
    rng = np.random.default_rng(seed)
    centers = wh[[int(rng.integers(len(wh)))]]
    while len(centers) < k:
        far = int(np.argmin(overlap(centers).max(axis=1)))
        centers = np.vstack([centers, wh[far]])
    for _ in range(iters):
        assign = np.argmax(overlap(centers), axis=1)
        new = np.array([wh[assign == c].mean(axis=0) if np.any(assign == c) else centers[c] for c in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    return [tuple(c) for c in sorted(centers.tolist(), key=lambda c: c[0] * c[1])]
