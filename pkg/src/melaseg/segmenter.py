"""Encoder-decoder lesion segmenter with pooling-index unpooling and the
median-frequency-balanced binary cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (AdamState, cosine_lr, Conv2d, MaxPool, Network, ShapeError, adam_step,
                     maxunpool2x2, maxunpool2x2_backward, sigmoid)

CLAMP_EPS = 1e-7


@dataclass
class SegConfig:
    height: int = 96
    width: int = 128
    channels: tuple = (16, 32, 64)
    in_channels: int = 3
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.001
    threshold: float = 0.5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        div = 2 ** len(self.channels)
        if self.height % div or self.width % div:
            raise ValueError(f"input {self.height}x{self.width} not divisible by 2^{len(self.channels)}")


@dataclass(frozen=True)
class MfbWeights:
    background: float
    lesion: float

    def as_array(self) -> np.ndarray:
        return np.array([self.background, self.lesion])


def compute_mfb(masks: Sequence[np.ndarray]) -> MfbWeights:
    """Median-frequency weights from pixel counts pooled over the whole collection."""
    lesion = sum(int(np.count_nonzero(m)) for m in masks)
    total = sum(int(np.asarray(m).size) for m in masks)
    background = total - lesion
    if lesion == 0 or background == 0:
        missing = "lesion" if lesion == 0 else "background"
        raise ValueError(f"class '{missing}' never occurs in the training masks; MFB undefined")
    f_bg, f_les = background / total, lesion / total
    med = (f_bg + f_les) / 2  # median of two values
    return MfbWeights(med / f_bg, med / f_les)


def seg_loss(pred: np.ndarray, truth: np.ndarray, weights: MfbWeights | None = None,
             eps: float = CLAMP_EPS, return_grad: bool = False):
    """Weighted binary cross-entropy averaged over all pixels.

    With ``return_grad`` the derivative with respect to ``pred`` is returned as
    well (zero where the clamp is active).
    """
    pred = np.asarray(pred, dtype=float) if not isinstance(pred, np.ndarray) else pred
    y = np.asarray(truth, dtype=pred.dtype)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {y.shape}")
    w = weights or MfbWeights(1.0, 1.0)
    phi = np.where(y > 0.5, w.lesion, w.background)
    p = np.clip(pred, eps, 1 - eps)
    m = pred.size
    loss = -np.sum(phi * (y * np.log(p) + (1 - y) * np.log(1 - p))) / m
    if not return_grad:
        return float(loss)
    inside = (pred > eps) & (pred < 1 - eps)
    grad = np.where(inside, -phi * (y / p - (1 - y) / (1 - p)) / m, 0.0)
    return float(loss), grad


class Segmenter(Network):
    """Encoder stages of conv -> leaky ReLU -> 2x2 pool (indices kept); mirrored
    decoder stages of unpool -> conv -> leaky ReLU; 1x1 conv + sigmoid output."""

    def __init__(self, cfg: SegConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        chans = cfg.channels
        self.depth = len(chans)
        cin = cfg.in_channels
        for k, ch in enumerate(chans):
            self.add(f"enc.{k}", Conv2d(cin, ch, 3, rng=rng, dtype=dtype))
            self.add(f"pool.{k}", MaxPool())
            cin = ch
        for k in range(self.depth):
            # decoder stage k undoes encoder stage depth-1-k
            src = self.depth - 1 - k
            cout = chans[src - 1] if src > 0 else chans[0]
            self.add(f"dec.{k}", Conv2d(chans[src], cout, 3, rng=rng, dtype=dtype))
        self.add("out", Conv2d(chans[0], 1, 1, act=False, rng=rng, dtype=dtype))
        self._by_name = dict(self.layers)
        self._prob = None

    def layer(self, name):
        return self._by_name[name]

    def forward(self, x):
        c = self.cfg
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, c.height, c.width):
            raise ShapeError(f"segmenter expects (N, {c.in_channels}, {c.height}, {c.width}), got {x.shape}")
        for k in range(self.depth):
            x = self.layer(f"enc.{k}").forward(x)
            x = self.layer(f"pool.{k}").forward(x)
        for k in range(self.depth):
            pool = self.layer(f"pool.{self.depth - 1 - k}")
            x = maxunpool2x2(x, pool.indices)
            x = self.layer(f"dec.{k}").forward(x)
        logits = self.layer("out").forward(x)
        self._prob = sigmoid(logits)[:, 0]
        return self._prob

    def backward(self, dprob):
        p = self._prob
        dy = (dprob * p * (1 - p))[:, None]
        dy = self.layer("out").backward(dy)
        for k in reversed(range(self.depth)):
            dy = self.layer(f"dec.{k}").backward(dy)
            dy = maxunpool2x2_backward(dy, self.layer(f"pool.{self.depth - 1 - k}").indices)
        for k in reversed(range(self.depth)):
            dy = self.layer(f"pool.{k}").backward(dy)
            dy = self.layer(f"enc.{k}").backward(dy)
        return dy

    def freeze(self, frozen: bool = True):
        for p in self.parameters():
            p.frozen = frozen


def build_segmenter(cfg: SegConfig, seed: int = 0, dtype=np.float64) -> Segmenter:
    return Segmenter(cfg, seed=seed, dtype=dtype)


def threshold_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def predict_mask(model: Segmenter, patch: np.ndarray):
    """Probability map and its binarization for one (C,H,W) patch or an (N,C,H,W) batch."""
    single = patch.ndim == 3
    x = patch[None] if single else patch
    prob = model.forward(x.astype(model.parameters()[0].weight.dtype, copy=False))
    if single:
        prob = prob[0]
    return prob, threshold_mask(prob, model.cfg.threshold)


@dataclass
class SegTrainLog:
    epoch_loss: list = field(default_factory=list)


def train_segmenter(model: Segmenter, images: np.ndarray, masks: np.ndarray,
                    weights: MfbWeights | None, epochs: int, batch_size: int = 32,
                    lr: float = 1e-3, seed: int = 0, state: AdamState | None = None,
                    lr_final_fraction: float = 1.0, on_epoch=None) -> SegTrainLog:
    """Adam minimization of :func:`seg_loss`; ``weights`` must come from training masks only."""
    if len(images) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    state = state or AdamState(lr=lr)
    params = model.parameters()
    history = SegTrainLog()
    n = len(images)
    for epoch in range(epochs):
        state.lr = cosine_lr(lr, epoch, epochs, lr_final_fraction)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            model.zero_grad()
            prob = model.forward(images[idx])
            loss, grad = seg_loss(prob, masks[idx], weights, return_grad=True)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite segmentation loss at epoch {epoch}")
            model.backward(grad.astype(prob.dtype, copy=False))
            adam_step(params, state)
            total += loss * len(idx)
        history.epoch_loss.append(total / n)
        if on_epoch:
            on_epoch(epoch, history)
    return history
