"""Dense numeric kernel: conv / pool / activations with hand-written backward
passes, an Adam optimizer and a central-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout.  Tests and oracles
run in float64; training may run in float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.1


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- parameters

@dataclass
class LayerParams:
    """Weights and bias of one layer together with their gradient accumulators."""

    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = None
    grad_bias: np.ndarray = None
    frozen: bool = False

    def __post_init__(self):
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    def zero_grad(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def tensors(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]


def glorot_uniform(cout: int, cin: int, k: int, rng: np.random.Generator,
                   dtype=np.float64) -> LayerParams:
    fan_in = cin * k * k
    fan_out = cout * k * k
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-lim, lim, size=(cout, cin, k, k)).astype(dtype)
    return LayerParams(w, np.zeros(cout, dtype=dtype))


# ---------------------------------------------------------------- convolution

def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} does not fit extent {n} padded by {pad}")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output positions (n, i, j); columns are (c, di, dj)."""
    n, c = xp.shape[:2]
    if k == 1:
        win = xp[:, :, :stride * ho:stride, :stride * wo:stride]
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def _check_conv(x, w, stride):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")


def _pad(x, pad):
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x


def conv2d_forward(x: np.ndarray, params: LayerParams, stride: int = 1, pad: int = 0,
                   return_cols: bool = False):
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``params.weight`` (Cout,Cin,K,K).

    Output extent per axis is ``(H + 2*pad - K) // stride + 1``.
    """
    w = params.weight
    _check_conv(x, w, stride)
    k = w.shape[2]
    ho = _conv_out(x.shape[2], k, stride, pad)
    wo = _conv_out(x.shape[3], k, stride, pad)
    cols = _im2col(_pad(x, pad), k, stride, ho, wo)
    out = cols @ w.reshape(w.shape[0], -1).T
    out += params.bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def conv2d_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray,
                    stride: int = 1, pad: int = 0, cols: np.ndarray | None = None,
                    input_grad: bool = True):
    """Return ``(input_grad, weight_grad, bias_grad)`` for :func:`conv2d_forward`.

    ``cols`` may carry the column matrix saved by the forward pass.  With
    ``input_grad=False`` the first element is ``None``.
    """
    w = params.weight
    _check_conv(x, w, stride)
    cout, cin, k, _ = w.shape
    n, _, h, wd = x.shape
    ho = _conv_out(h, k, stride, pad)
    wo = _conv_out(wd, k, stride, pad)
    expected = (n, cout, ho, wo)
    if upstream.shape != expected:
        raise ShapeError(f"conv2d backward: upstream shape {upstream.shape} != output shape {expected}")
    if cols is None:
        cols = _im2col(_pad(x, pad), k, stride, ho, wo)
    dy = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(-1, cout)
    db = dy.sum(axis=0)
    dw = (dy.T @ cols).reshape(w.shape)
    if not input_grad:
        return None, dw, db
    dcols = (dy @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
    # scatter in channel-last layout, transpose once at the end
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, :, i, j]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------- activations

def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, upstream: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # subgradient 1 at exactly zero
    return np.where(x >= 0, upstream, slope * upstream)


def sigmoid(x):
    x = np.asarray(x, dtype=float) if not isinstance(x, np.ndarray) else x
    return np.exp(-np.logaddexp(0.0, -x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


exp = np.exp


# ---------------------------------------------------------------- pooling

@dataclass
class PoolIndices:
    """Argmax offset (0..3, row-major inside the 2x2 window) per pooled cell."""

    offsets: np.ndarray
    input_shape: tuple


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    offsets = win.argmax(axis=-1)  # first max wins ties
    out = np.take_along_axis(win, offsets[..., None], axis=-1)[..., 0]
    return out, PoolIndices(offsets.astype(np.int8), x.shape)


def maxunpool2x2(x: np.ndarray, indices: PoolIndices) -> np.ndarray:
    n, c, h, w = indices.input_shape
    if x.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"maxunpool2x2: input {x.shape} does not match pooled shape of {indices.input_shape}")
    off = indices.offsets
    if off.min(initial=0) < 0 or off.max(initial=0) > 3:
        raise ShapeError("maxunpool2x2: pool index outside its 2x2 window")
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=x.dtype)
    np.put_along_axis(win, off[..., None].astype(np.intp), x[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def maxpool2x2_backward(upstream: np.ndarray, indices: PoolIndices) -> np.ndarray:
    return maxunpool2x2(upstream, indices)


def maxunpool2x2_backward(upstream: np.ndarray, indices: PoolIndices) -> np.ndarray:
    n, c, h, w = indices.input_shape
    win = upstream.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    return np.take_along_axis(win, indices.offsets[..., None].astype(np.intp), axis=-1)[..., 0]


# ---------------------------------------------------------------- layers

class Conv2d:
    """Convolution layer with optional fused leaky ReLU."""

    def __init__(self, cin, cout, k=3, stride=1, pad=None, act=True, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = glorot_uniform(cout, cin, k, rng, dtype)
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.act = act
        self._x = None
        self._z = None
        self._cols = None
        self.input_grad = True

    def forward(self, x):
        self._x = x
        z, self._cols = conv2d_forward(x, self.params, self.stride, self.pad, return_cols=True)
        if not self.act:
            return z
        self._z = z
        return leaky_relu(z)

    def backward(self, dy):
        if self.act:
            dy = leaky_relu_backward(self._z, dy)
        dx, dw, db = conv2d_backward(self._x, self.params, dy, self.stride, self.pad, self._cols,
                                     self.input_grad)
        if not self.params.frozen:
            self.params.grad_weight += dw
            self.params.grad_bias += db
        return dx

    def kink_margin(self) -> float:
        return float(np.abs(self._z).min()) if self.act and self._z is not None else np.inf

    def kink_signature(self):
        return (self._z >= 0).tobytes() if self.act and self._z is not None else b""


class MaxPool:
    def __init__(self):
        self.indices = None
        self._x = None

    def forward(self, x):
        self._x = x
        out, self.indices = maxpool2x2_forward(x)
        return out

    def backward(self, dy):
        return maxpool2x2_backward(dy, self.indices)

    def kink_margin(self) -> float:
        n, c, h, w = self._x.shape
        win = np.sort(self._x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                      .reshape(n, c, h // 2, w // 2, 4), axis=-1)
        return float((win[..., 3] - win[..., 2]).min())

    def kink_signature(self):
        return self.indices.offsets.tobytes()


def iter_params(layers: Iterable) -> list[LayerParams]:
    return [layer.params for layer in layers if hasattr(layer, "params")]


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[LayerParams], state: AdamState) -> AdamState:
    """One bias-corrected Adam update applied in place to every non-frozen parameter."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for pi, p in enumerate(params):
        if p.frozen:
            continue
        for ti, (value, grad) in enumerate(p.tensors()):
            key = (pi, ti)
            if key not in state.m:
                state.m[key] = np.zeros_like(value)
                state.v[key] = np.zeros_like(value)
            m, v = state.m[key], state.v[key]
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def cosine_lr(base: float, epoch: int, epochs: int, final_fraction: float = 1.0) -> float:
    """Cosine anneal from ``base`` to ``base * final_fraction`` over ``epochs``; 1.0 keeps it constant."""
    if final_fraction == 1.0 or epochs <= 1:
        return base
    t = epoch / (epochs - 1)
    return base * (final_fraction + (1 - final_fraction) * 0.5 * (1 + np.cos(np.pi * t)))


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    probes: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.probes > 0 and self.max_rel_error < self.tolerance


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def grad_check(loss_fn: Callable[[], float], tensors: Sequence[tuple[np.ndarray, np.ndarray]],
               tolerance: float = 1e-4, h: float = 1e-5, max_probes: int = 40,
               signature: Callable[[], object] | None = None,
               rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``tensors`` pairs each float64 array that ``loss_fn`` reads with its analytic
    gradient (already computed at the current point).  Up to ``max_probes``
    coordinates per tensor are perturbed by ``+-h``.  If ``signature`` is given,
    a probe whose perturbation changes it (a leaky-ReLU sign flip or a pool
    argmax switch) is skipped rather than scored.  Relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    probes = skipped = 0
    base_sig = signature() if signature else None
    for value, grad in tensors:
        flat = value.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        count = min(max_probes, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False) if flat.size > count else range(flat.size)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = loss_fn()
            sp = signature() if signature else None
            flat[idx] = orig - h
            fm = loss_fn()
            sm = signature() if signature else None
            flat[idx] = orig
            if signature and (sp != base_sig or sm != base_sig):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, rel_error(gflat[idx], numeric, floor))
            probes += 1
    if signature:
        loss_fn()
    return GradCheckReport(worst, probes, skipped, tolerance)


# ---------------------------------------------------------------- containers

class Network:
    """Named, ordered collection of layers with checkpoint-friendly state."""

    def __init__(self):
        self.layers: list[tuple[str, object]] = []

    def add(self, name: str, layer):
        self.layers.append((name, layer))
        return layer

    def parameters(self) -> list[LayerParams]:
        return [layer.params for _, layer in self.layers if hasattr(layer, "params")]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        """Propagate ``dy``; returns None when a frozen prefix made the input gradient unnecessary."""
        stop = 0
        for i, (_, layer) in enumerate(self.layers):
            if hasattr(layer, "params") and not layer.params.frozen:
                break
            stop = i + 1
        for _, layer in reversed(self.layers[stop:]):
            dy = layer.backward(dy)
        return dy if stop == 0 else None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers:
            if hasattr(layer, "params"):
                out[f"{name}.weight"] = layer.params.weight
                out[f"{name}.bias"] = layer.params.bias
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], skip: Iterable[str] = ()):
        skip = set(skip)
        for name, layer in self.layers:
            if name in skip or not hasattr(layer, "params"):
                continue
            for part in ("weight", "bias"):
                key = f"{name}.{part}"
                if key not in tensors:
                    raise KeyError(f"checkpoint lacks tensor {key!r}")
                dst = getattr(layer.params, part)
                src = np.asarray(tensors[key])
                if src.shape != dst.shape:
                    raise ShapeError(f"tensor {key!r}: checkpoint shape {src.shape} != model shape {dst.shape}")
                dst[...] = src

    def kink_signature(self):
        return tuple(layer.kink_signature() for _, layer in self.layers if hasattr(layer, "kink_signature"))

    def kink_margin(self) -> float:
        return min((layer.kink_margin() for _, layer in self.layers if hasattr(layer, "kink_margin")),
                   default=np.inf)

    def set_dtype(self, dtype):
        for p in self.parameters():
            p.weight = p.weight.astype(dtype)
            p.bias = p.bias.astype(dtype)
            p.grad_weight = np.zeros_like(p.weight)
            p.grad_bias = np.zeros_like(p.bias)
        return self
