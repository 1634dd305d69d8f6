"""Finite-difference checks for every differentiable piece of the pipeline.

Each ``check_*`` function builds a small float64 fragment from ``seed``,
computes analytic gradients, and returns a :class:`GradCheckReport`.
"""
from __future__ import annotations

import numpy as np

from .detector import (BoundingBox, DetectorConfig, assign_targets, build_detector,
                       decode_arrays, yolo_loss)
from .segmenter import SegConfig, build_segmenter, compute_mfb, seg_loss
from .tensor import (GradCheckReport, conv2d_backward, conv2d_forward,
                     glorot_uniform, grad_check, leaky_relu, leaky_relu_backward,
                     maxpool2x2_backward, maxpool2x2_forward, maxunpool2x2,
                     maxunpool2x2_backward)

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def check_linear(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    p = glorot_uniform(2, 3, 1, rng)
    p.bias[...] = rng.normal(size=2)
    r = rng.normal(size=(2, 2, 4, 4))

    def loss():
        return float(np.sum(conv2d_forward(x, p) * r))
    dx, dw, db = conv2d_backward(x, p, r)
    # central differences are exact for a linear map at any step size
    return grad_check(loss, [(x, dx), (p.weight, dw), (p.bias, db)], 1e-8, h=1.0, rng=rng)


def check_conv(seed: int, stride: int = 1) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5))
    p = glorot_uniform(3, 2, 3, rng)
    p.bias[...] = rng.normal(size=3)
    out = conv2d_forward(x, p, stride, 1)
    r = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(conv2d_forward(x, p, stride, 1) * r))
    dx, dw, db = conv2d_backward(x, p, r, stride, 1)
    return grad_check(loss, [(x, dx), (p.weight, dw), (p.bias, db)], TOLERANCE, rng=rng)


def check_leaky_relu(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, (3, 4, 5))
    r = rng.normal(size=x.shape)

    def loss():
        return float(np.sum(leaky_relu(x) * r))
    return grad_check(loss, [(x, leaky_relu_backward(x, r))], TOLERANCE, rng=rng,
                      signature=lambda: (x >= 0).tobytes())


def check_conv_stack(seed: int) -> GradCheckReport:
    """conv -> leaky ReLU -> conv -> leaky ReLU."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 6, 6))
    p1 = glorot_uniform(3, 2, 3, rng)
    p2 = glorot_uniform(2, 3, 3, rng)
    p1.bias[...] = rng.normal(size=3) * 0.1
    r = rng.normal(size=(2, 2, 3, 3))
    state = {}

    def forward():
        z1 = conv2d_forward(x, p1, 1, 1)
        a1 = leaky_relu(z1)
        z2 = conv2d_forward(a1, p2, 2, 1)
        state.update(z1=z1, a1=a1, z2=z2)
        return float(np.sum(leaky_relu(z2) * r))

    forward()
    z1, a1, z2 = state["z1"], state["a1"], state["z2"]
    dz2 = leaky_relu_backward(z2, r)
    da1, dw2, db2 = conv2d_backward(a1, p2, dz2, 2, 1)
    dz1 = leaky_relu_backward(z1, da1)
    dx, dw1, db1 = conv2d_backward(x, p1, dz1, 1, 1)

    def sig():
        forward()
        return (state["z1"] >= 0).tobytes() + (state["z2"] >= 0).tobytes()
    return grad_check(forward, [(x, dx), (p1.weight, dw1), (p1.bias, db1), (p2.weight, dw2), (p2.bias, db2)],
                      TOLERANCE, rng=rng, signature=sig)


def check_pool_unpool(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.01 + rng.normal(size=(2, 2, 6, 6)) * 1e-3
    r1 = rng.normal(size=(2, 2, 3, 3))
    r2 = rng.normal(size=x.shape)

    def loss():
        pooled, idx = maxpool2x2_forward(x)
        return float(np.sum(pooled * r1) + np.sum(maxunpool2x2(pooled, idx) * r2))

    _, idx = maxpool2x2_forward(x)
    dpooled = r1 + maxunpool2x2_backward(r2, idx)
    dx = maxpool2x2_backward(dpooled, idx)
    return grad_check(loss, [(x, dx)], TOLERANCE, rng=rng,
                      signature=lambda: maxpool2x2_forward(x)[1].offsets.tobytes())


def _random_boxes(rng, k):
    out = []
    for _ in range(k):
        w, h = rng.uniform(0.15, 0.5, 2)
        out.append(BoundingBox(float(rng.uniform(w / 2, 1 - w / 2)), float(rng.uniform(h / 2, 1 - h / 2)),
                               float(w), float(h)))
    return out


def check_detector(seed: int) -> GradCheckReport:
    """Tiny backbone + head + decode + sum-of-squares loss, all parameters probed."""
    rng = np.random.default_rng(seed)
    cfg = DetectorConfig(S=2, B=2, C=1, anchors=((0.2, 0.2), (0.5, 0.5)), input_side=8)
    model = build_detector(cfg, ((4, 2), (4, 2)), seed=seed)
    model.layers[0][1].input_grad = True
    x = rng.normal(size=(2, 3, 8, 8))
    boxes = [_random_boxes(rng, 1), _random_boxes(rng, 2)]
    raw = model.forward(x)
    d = decode_arrays(raw, cfg)
    assigns = [assign_targets(b, d, cfg, index=k) for k, b in enumerate(boxes)]

    def loss():
        return yolo_loss(model.forward(x), assigns, cfg)[0]

    model.zero_grad()
    _, _, draw = yolo_loss(model.forward(x), assigns, cfg)
    dx = model.backward(draw)
    tensors = [(x, dx)]
    for p in model.parameters():
        tensors += [(p.weight, p.grad_weight.copy()), (p.bias, p.grad_bias.copy())]

    def sig():
        model.forward(x)
        return model.kink_signature()
    return grad_check(loss, tensors, TOLERANCE, rng=rng, signature=sig)


def check_segmenter(seed: int) -> GradCheckReport:
    """Two-stage encoder-decoder with the MFB-weighted cross-entropy."""
    rng = np.random.default_rng(seed)
    cfg = SegConfig(height=8, width=8, channels=(3, 4), in_channels=2)
    model = build_segmenter(cfg, seed=seed)
    model.layers[0][1].input_grad = True
    # keep the sigmoid away from the clamp
    out = model.layer("out").params
    out.weight *= 0.3
    x = rng.normal(size=(2, 2, 8, 8))
    y = (rng.uniform(size=(2, 8, 8)) < 0.3).astype(float)
    y[0, 0, 0], y[0, 0, 1] = 1.0, 0.0
    weights = compute_mfb(list(y))

    def loss():
        return seg_loss(model.forward(x), y, weights)

    model.zero_grad()
    prob = model.forward(x)
    assert 0.01 <= prob.min() and prob.max() <= 0.99, "probabilities outside [0.01, 0.99]"
    _, g = seg_loss(prob, y, weights, return_grad=True)
    dx = model.backward(g)
    tensors = [(x, dx)]
    for p in model.parameters():
        tensors += [(p.weight, p.grad_weight.copy()), (p.bias, p.grad_bias.copy())]

    def sig():
        model.forward(x)
        return model.kink_signature()
    return grad_check(loss, tensors, TOLERANCE, rng=rng, signature=sig)


CHECKS = {
    "linear": check_linear,
    "conv": check_conv,
    "conv_stride2": lambda seed: check_conv(seed, stride=2),
    "leaky_relu": check_leaky_relu,
    "conv_stack": check_conv_stack,
    "pool_unpool": check_pool_unpool,
    "detector": check_detector,
    "segmenter": check_segmenter,
}


def run_suite(seeds=range(20), names=None):
    """Yield ``(name, seed, report)`` for every check and seed."""
    for name in names or CHECKS:
        for seed in seeds:
            yield name, seed, CHECKS[name](seed)
