"""Layer primitives with hand-derived forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout.  Every function
works in whatever floating dtype it is handed, so the same code serves the
float32 training path and the float64 path used for gradient checking.

Parameterised layers are small dataclasses holding arrays; the same classes
double as gradient containers (a ``ConvLayer`` of gradients is congruent to
the ``ConvLayer`` it differentiates).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError

SPP_BINS = (1, 2, 4, 8)


# ---------------------------------------------------------------------------
# layer containers
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    weights: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    stats_momentum: float = 0.1


@dataclass
class LinearLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass(frozen=True)
class EluConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"ELU alpha must be positive, got {self.alpha}")


@dataclass
class FpnParams:
    """Lateral 1x1 and smoothing 3x3 convolutions, ordered (level3, level4, level5)."""

    lateral: list[ConvLayer] = field(default_factory=list)
    smooth: list[ConvLayer] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.lateral[0].out_channels


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def he_normal(shape: Sequence[int], fan_in: int, rng: np.random.Generator,
              dtype=np.float32) -> np.ndarray:
    """Zero-mean normal draws with standard deviation ``sqrt(2 / fan_in)``."""
    return (rng.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_conv(in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3,
              dtype=np.float32) -> ConvLayer:
    fan_in = in_ch * kernel * kernel
    return ConvLayer(he_normal((out_ch, in_ch, kernel, kernel), fan_in, rng, dtype),
                     np.zeros(out_ch, dtype=dtype))


def init_linear(in_features: int, out_features: int, rng: np.random.Generator,
                dtype=np.float32) -> LinearLayer:
    return LinearLayer(he_normal((out_features, in_features), in_features, rng, dtype),
                       np.zeros(out_features, dtype=dtype))


def init_batchnorm(channels: int, dtype=np.float32, eps: float = 1e-5,
                   stats_momentum: float = 0.1) -> BatchNormLayer:
    return BatchNormLayer(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        eps=eps,
        stats_momentum=stats_momentum,
    )


def init_params(kind: str, shape: Sequence[int], rng: np.random.Generator | None = None,
                dtype=np.float32):
    """Build a freshly initialised layer by kind.

    ``kind`` is one of ``"conv"`` (shape ``(in_ch, out_ch[, kernel])``),
    ``"linear"`` (``(in, out)``) or ``"batchnorm"`` (``(channels,)``).
    Weighted layers need a seeded ``rng``; batch norm is deterministic.
    """
    if kind == "batchnorm":
        return init_batchnorm(shape[0], dtype=dtype)
    if rng is None:
        raise ValueError(f"{kind} initialisation needs a seeded generator")
    if kind == "conv":
        kernel = shape[2] if len(shape) > 2 else 3
        return init_conv(shape[0], shape[1], rng, kernel=kernel, dtype=dtype)
    if kind == "linear":
        return init_linear(shape[0], shape[1], rng, dtype=dtype)
    raise ValueError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution (odd square kernels, stride 1, "same" zero padding)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Columns matrix of shape (C*k*k, B*H*W); rows ordered (c, i, j).

    Built from k*k shifted slices so every copy moves whole contiguous rows.
    """
    b, c, h, w = x.shape
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, b, h, w), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, b * h * w)


def _check_conv(x: np.ndarray, layer: ConvLayer):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input (B, C, H, W), got shape {x.shape}")
    k = layer.weights.shape[-1]
    if layer.weights.shape[-2] != k or k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {layer.weights.shape[2:]}")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels, layer expects {layer.in_channels}")


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check_conv(x, layer)
    b, _, h, w = x.shape
    k = layer.weights.shape[-1]
    out = layer.weights.reshape(layer.out_channels, -1) @ _im2col(x, k)
    out += layer.bias[:, None]
    return np.ascontiguousarray(out.reshape(-1, b, h, w).transpose(1, 0, 2, 3))


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Return ``(grad_input, grad_weights, grad_bias)``.

    ``grad_input`` is None when ``need_input_grad`` is false (first layer).
    """
    _check_conv(x, layer)
    b, _, h, w = x.shape
    expected = (b, layer.out_channels, h, w)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d grad_out shape {grad_out.shape} != forward output {expected}")
    k = layer.weights.shape[-1]
    g2d = grad_out.transpose(1, 0, 2, 3).reshape(layer.out_channels, -1)
    grad_w = (g2d @ _im2col(x, k).T).reshape(layer.weights.shape)
    grad_b = g2d.sum(axis=1)
    grad_x = None
    if need_input_grad:
        # correlation with the spatially flipped, channel-transposed kernel
        flipped = ConvLayer(
            np.ascontiguousarray(layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
            np.zeros(layer.in_channels, dtype=layer.weights.dtype),
        )
        grad_x = conv2d_forward(grad_out, flipped)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

def _bn_stats(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, mode: str = "train") -> np.ndarray:
    """Per-channel normalisation.

    In ``"train"`` mode the batch statistics are used and the layer's running
    statistics are moved towards them (unbiased variance).  ``"eval"`` uses
    the running statistics only.
    """
    if x.ndim != 4 or x.shape[1] != layer.gamma.shape[0]:
        raise ShapeError(f"batchnorm input {x.shape} incompatible with {layer.gamma.shape[0]} channels")
    shape = (1, -1, 1, 1)
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ShapeError("batchnorm train mode needs at least 2 values per channel")
        mean, var = _bn_stats(x)
        m = layer.stats_momentum
        layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean
        layer.running_var[...] = (1 - m) * layer.running_var + m * var * (n / (n - 1))
    elif mode == "eval":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    scale = layer.gamma / np.sqrt(var + layer.eps)
    shift = layer.beta - mean * scale
    return x * scale.reshape(shape).astype(x.dtype) + shift.reshape(shape).astype(x.dtype)


def batchnorm_backward(x: np.ndarray, layer: BatchNormLayer, grad_out: np.ndarray,
                       mode: str = "train"):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"batchnorm grad_out shape {grad_out.shape} != input shape {x.shape}")
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    if mode == "train":
        mean, var = _bn_stats(x)
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        coef = (layer.gamma * inv_std / n).reshape(shape)
        grad_x = coef * (n * grad_out - grad_beta.reshape(shape) - xhat * grad_gamma.reshape(shape))
    else:
        grad_x = grad_out * (layer.gamma * inv_std).reshape(shape)
    return grad_x.astype(x.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# ELU
# ---------------------------------------------------------------------------

def elu(x: np.ndarray, cfg: EluConfig = EluConfig()) -> np.ndarray:
    # max(x, 0) + alpha * expm1(min(x, 0)) covers both branches without overflow
    out = np.expm1(np.minimum(x, 0))
    if cfg.alpha != 1.0:
        out *= cfg.alpha
    out += np.maximum(x, 0)
    return out


def elu_backward(x: np.ndarray, grad_out: np.ndarray, cfg: EluConfig = EluConfig()) -> np.ndarray:
    deriv = np.exp(np.minimum(x, 0))
    if cfg.alpha != 1.0:
        deriv = np.where(x >= 0, 1.0, cfg.alpha * deriv)
    return (grad_out * deriv).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2x2(x: np.ndarray):
    """2x2 max pooling, stride 2.  Returns ``(output, argmax)``.

    ``argmax`` holds the winning position 0..3 (row-major inside the window)
    for each output cell; ties go to the first position.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects a 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    corners = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    idx = np.full(out.shape, 3, dtype=np.int8)
    for pos in (2, 1, 0):
        idx[corners[pos] == out] = pos
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"maxpool grad_out {grad_out.shape} != cached argmax {argmax.shape}")
    b, c, h2, w2 = grad_out.shape
    grad = np.zeros((b, c, 2 * h2, 2 * w2), dtype=grad_out.dtype)
    zero = np.zeros((), dtype=grad_out.dtype)
    for pos, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        grad[:, :, di::2, dj::2] = np.where(argmax == pos, grad_out, zero)
    return grad


def spp_forward(x: np.ndarray, bins: Sequence[int] = SPP_BINS) -> np.ndarray:
    """Average-pool over an n x n grid for every n in ``bins``.

    The output is level-major: all channels of the 1x1 level, then all
    channels of the 2x2 level, and so on; inside a level each channel's
    grid is flattened row-major.  Width is ``sum(n*n) * C``.
    """
    if x.ndim != 4:
        raise ShapeError(f"spp expects a 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    parts = []
    for n in bins:
        if h % n or w % n:
            raise ShapeError(f"spp level {n}x{n} does not divide feature map {h}x{w}")
        cell = x.reshape(b, c, n, h // n, n, w // n).mean(axis=(3, 5))
        parts.append(cell.reshape(b, -1))
    return np.concatenate(parts, axis=1)


def spp_backward(grad_out: np.ndarray, input_shape: Sequence[int],
                 bins: Sequence[int] = SPP_BINS) -> np.ndarray:
    b, c, h, w = input_shape
    width = sum(n * n for n in bins) * c
    if grad_out.shape != (b, width):
        raise ShapeError(f"spp grad_out {grad_out.shape} != expected {(b, width)}")
    grad = np.zeros((b, c, h, w), dtype=grad_out.dtype)
    offset = 0
    for n in bins:
        g = grad_out[:, offset:offset + c * n * n].reshape(b, c, n, 1, n, 1)
        offset += c * n * n
        ch, cw = h // n, w // n
        grad += np.broadcast_to(g / (ch * cw), (b, c, n, ch, n, cw)).reshape(b, c, h, w)
    return grad


def spp_width(channels: int, bins: Sequence[int] = SPP_BINS) -> int:
    return sum(n * n for n in bins) * channels


# ---------------------------------------------------------------------------
# feature pyramid
# ---------------------------------------------------------------------------

def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling: every cell becomes a 2x2 block."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    b, c, h, w = grad_out.shape
    return grad_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def init_fpn(in_channels: Sequence[int], rng: np.random.Generator, channels: int = 32,
             dtype=np.float32) -> FpnParams:
    return FpnParams(
        lateral=[init_conv(c, channels, rng, kernel=1, dtype=dtype) for c in in_channels],
        smooth=[init_conv(channels, channels, rng, kernel=3, dtype=dtype) for _ in in_channels],
    )


def fpn_forward(c3: np.ndarray, c4: np.ndarray, c5: np.ndarray, params: FpnParams):
    """Top-down pyramid over three taps, globally pooled.

    Returns ``(features, cache)``; ``features`` is (B, 3 * channels) ordered
    level3, level4, level5.
    """
    h5, w5 = c5.shape[2:]
    if c4.shape[2:] != (2 * h5, 2 * w5) or c3.shape[2:] != (4 * h5, 4 * w5):
        raise ShapeError(
            "fpn taps must have spatial extents in ratio 4:2:1, got "
            f"{c3.shape[2:]}, {c4.shape[2:]}, {c5.shape[2:]}")
    lat = [conv2d_forward(c, layer) for c, layer in zip((c3, c4, c5), params.lateral)]
    p5 = lat[2]
    p4 = lat[1] + upsample2x(p5)
    p3 = lat[0] + upsample2x(p4)
    merged = (p3, p4, p5)
    smoothed = [conv2d_forward(p, layer) for p, layer in zip(merged, params.smooth)]
    feats = np.concatenate([s.mean(axis=(2, 3)) for s in smoothed], axis=1)
    cache = {"taps": (c3, c4, c5), "merged": merged, "shapes": [s.shape for s in smoothed]}
    return feats, cache


def fpn_backward(cache: dict, params: FpnParams, grad_out: np.ndarray):
    """Return ``(grad_c3, grad_c4, grad_c5, param_grads)``."""
    ch = params.channels
    if grad_out.shape[1] != 3 * ch:
        raise ShapeError(f"fpn grad_out width {grad_out.shape[1]} != {3 * ch}")
    taps, merged = cache["taps"], cache["merged"]
    grads = FpnParams()
    grad_merged = []
    for i, (p, shape, layer) in enumerate(zip(merged, cache["shapes"], params.smooth)):
        g = grad_out[:, i * ch:(i + 1) * ch]
        area = shape[2] * shape[3]
        g_s = np.broadcast_to((g / area)[:, :, None, None], shape)
        gp, gw, gb = conv2d_backward(p, layer, np.ascontiguousarray(g_s))
        grads.smooth.append(ConvLayer(gw, gb))
        grad_merged.append(gp)
    gp3, gp4, gp5 = grad_merged
    gp4 = gp4 + upsample2x_backward(gp3)
    gp5 = gp5 + upsample2x_backward(gp4)
    tap_grads = []
    for c, g, layer in zip(taps, (gp3, gp4, gp5), params.lateral):
        gc, gw, gb = conv2d_backward(c, layer, g)
        grads.lateral.append(ConvLayer(gw, gb))
        tap_grads.append(gc)
    return tap_grads[0], tap_grads[1], tap_grads[2], grads


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

def linear_forward(x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.weights.shape[1]:
        raise ShapeError(
            f"linear input shape {x.shape} incompatible with weights {layer.weights.shape}")
    return x @ layer.weights.T + layer.bias


def linear_backward(x: np.ndarray, layer: LinearLayer, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], layer.weights.shape[0]):
        raise ShapeError(f"linear grad_out shape {grad_out.shape} mismatched")
    return grad_out @ layer.weights, grad_out.T @ x, grad_out.sum(axis=0)
